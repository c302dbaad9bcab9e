//! Adam-based latent search over one latent or a window of latents.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::group_consistency_loss;
use crate::tensor::Latent;

/// A differentiable scalar function of a latent.
pub trait Objective: Sync {
    fn evaluate(&self, z: &Latent) -> Result<(f64, Latent)>;
}

impl<F> Objective for F
where
    F: Fn(&Latent) -> Result<(f64, Latent)> + Sync,
{
    fn evaluate(&self, z: &Latent) -> Result<(f64, Latent)> {
        self(z)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub max_iters: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Project every iterate onto `[-1, 1]^d`.
    pub clamp_z: bool,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            max_iters: 1000,
            learning_rate: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clamp_z: true,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    pub fn with_iters(&self, max_iters: usize) -> Self {
        OptimConfig {
            max_iters,
            ..self.clone()
        }
    }
}

/// Adam state for one flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(dim: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    pub fn from_config(dim: usize, config: &OptimConfig) -> Self {
        Self::new(
            dim,
            config.learning_rate,
            config.beta1,
            config.beta2,
            config.eps,
        )
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        self.t = self.t.saturating_add(1);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Objective values recorded before each update, plus the final latents.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub values: Vec<f64>,
    pub final_latents: Vec<Latent>,
}

impl Trajectory {
    pub fn iterations(&self) -> usize {
        self.values.len()
    }

    pub fn final_value(&self) -> Option<f64> {
        self.values.last().copied()
    }

    /// `iteration,objective` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,objective\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{i},{v}");
        }
        out
    }

    pub fn iterations_to_saturation(&self, fraction: f64) -> Result<usize> {
        iterations_to_saturation(&self.values, fraction)
    }
}

fn check_finite(value: f64, grad: &Latent, iteration: usize) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "objective value".into(),
            iteration,
        });
    }
    if grad.as_slice().iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient".into(),
            iteration,
        });
    }
    Ok(())
}

fn evaluate_at(objective: &dyn Objective, z: &[f64], iteration: usize) -> Result<(f64, Latent)> {
    let latent = Latent::new(z.to_vec()).map_err(|_| Error::NonFinite {
        what: "latent".into(),
        iteration,
    })?;
    let (value, grad) = objective
        .evaluate(&latent)
        .map_err(|e| e.context(format!("objective failed at iteration {iteration}")))?;
    if grad.dim() != z.len() {
        return Err(Error::shape(format!(
            "gradient has {} components for a {}-dimensional latent",
            grad.dim(),
            z.len()
        )));
    }
    check_finite(value, &grad, iteration)?;
    Ok((value, grad))
}

fn project(z: &mut [f64], config: &OptimConfig) {
    if config.clamp_z {
        for v in z {
            *v = v.clamp(-1.0, 1.0);
        }
    }
}

/// Runs `max_iters` Adam steps from `z0`.
pub fn optimize_single(
    z0: &Latent,
    objective: &dyn Objective,
    config: &OptimConfig,
) -> Result<(Latent, Trajectory)> {
    config.validate()?;
    let mut z = z0.as_slice().to_vec();
    let mut adam = Adam::from_config(z.len(), config);
    let mut values = Vec::with_capacity(config.max_iters);
    for it in 0..config.max_iters {
        let (value, grad) = evaluate_at(objective, &z, it)?;
        values.push(value);
        adam.step(&mut z, grad.as_slice());
        project(&mut z, config);
    }
    let z_hat = Latent::new(z).map_err(|_| Error::NonFinite {
        what: "latent".into(),
        iteration: config.max_iters,
    })?;
    let trajectory = Trajectory {
        values,
        final_latents: vec![z_hat.clone()],
    };
    Ok((z_hat, trajectory))
}

/// Jointly minimizes `Σ_i J_i(z_i) + mu · L_G(z_1..z_n)`.
///
/// Each frame objective is stepped with its own Adam state, exactly as
/// [`optimize_single`] would. The L1 consensus term is then applied through
/// its proximal operator with step `learning_rate * mu`, coordinate by
/// coordinate. With `mu = 0` or a single frame the iterates are identical to
/// independent single-latent runs.
pub fn optimize_window(
    z_inits: &[Latent],
    objectives: &[&dyn Objective],
    mu: f64,
    config: &OptimConfig,
) -> Result<(Vec<Latent>, Trajectory)> {
    config.validate()?;
    if z_inits.is_empty() {
        return Err(Error::shape("window needs at least one frame"));
    }
    if objectives.len() != z_inits.len() {
        return Err(Error::shape(format!(
            "{} initial latents but {} objectives",
            z_inits.len(),
            objectives.len()
        )));
    }
    if !(mu.is_finite() && mu >= 0.0) {
        return Err(Error::Config(format!(
            "mu must be finite and >= 0, got {mu}"
        )));
    }
    let dim = z_inits[0].dim();
    if z_inits.iter().any(|z| z.dim() != dim) {
        return Err(Error::shape("latents in a window must share a dimension"));
    }
    let n = z_inits.len();
    let couple = mu > 0.0 && n > 1;
    let tau = config.learning_rate * mu;

    let mut zs: Vec<Vec<f64>> = z_inits.iter().map(|z| z.as_slice().to_vec()).collect();
    let mut adams: Vec<Adam> = (0..n).map(|_| Adam::from_config(dim, config)).collect();
    let mut values = Vec::with_capacity(config.max_iters);
    let mut column = vec![0.0; n];
    for it in 0..config.max_iters {
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(n);
        for (z, objective) in zs.iter().zip(objectives) {
            let (value, grad) = evaluate_at(*objective, z, it)?;
            total += value;
            grads.push(grad);
        }
        if couple {
            let current: Vec<Latent> = zs
                .iter()
                .map(|z| Latent::new(z.clone()))
                .collect::<Result<_>>()?;
            total += mu * group_consistency_loss(&current, n)?.0;
        }
        values.push(total);

        for ((z, adam), grad) in zs.iter_mut().zip(&mut adams).zip(&grads) {
            adam.step(z, grad.as_slice());
        }
        if couple {
            for j in 0..dim {
                for (c, z) in column.iter_mut().zip(&zs) {
                    *c = z[j];
                }
                consensus_prox(&mut column, tau);
                for (c, z) in column.iter().zip(zs.iter_mut()) {
                    z[j] = *c;
                }
            }
        }
        for z in &mut zs {
            project(z, config);
        }
    }
    let finals = zs
        .into_iter()
        .map(|z| {
            Latent::new(z).map_err(|_| Error::NonFinite {
                what: "latent".into(),
                iteration: config.max_iters,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let trajectory = Trajectory {
        values,
        final_latents: finals.clone(),
    };
    Ok((finals, trajectory))
}

/// Proximal operator of `tau · Σ_{i<k} |x_i − x_k|`, in place.
///
/// The minimizer keeps the order of the inputs. On that order the penalty is
/// linear, so the problem reduces to isotonic regression of the sorted values
/// shifted by `tau · (n + 1 − 2r)` (rank `r` counted from 1), solved here by
/// pool-adjacent-violators.
pub fn consensus_prox(values: &mut [f64], tau: f64) {
    let n = values.len();
    if n < 2 || tau <= 0.0 {
        return;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    // blocks of (sum, count)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (r, &i) in order.iter().enumerate() {
        let target = values[i] + tau * (n as f64 - 1.0 - 2.0 * r as f64);
        blocks.push((target, 1));
        while blocks.len() > 1 {
            let (s1, c1) = blocks[blocks.len() - 1];
            let (s0, c0) = blocks[blocks.len() - 2];
            if s0 / c0 as f64 >= s1 / c1 as f64 {
                blocks.pop();
                let last = blocks.len() - 1;
                blocks[last] = (s0 + s1, c0 + c1);
            } else {
                break;
            }
        }
    }
    let mut r = 0;
    for (sum, count) in blocks {
        let mean = sum / count as f64;
        for &i in &order[r..r + count] {
            values[i] = mean;
        }
        r += count;
    }
}

/// First iteration whose objective reaches `fraction` of the run's total
/// decrease, measured against the run's own final value.
pub fn iterations_to_saturation(values: &[f64], fraction: f64) -> Result<usize> {
    let (&first, &last) = match (values.first(), values.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::InvalidValue("empty trajectory".into())),
    };
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("fraction {fraction} outside [0, 1]")));
    }
    if first == last {
        return Ok(0);
    }
    let threshold = last + (1.0 - fraction) * (first - last);
    Ok(values
        .iter()
        .position(|&v| v <= threshold)
        .unwrap_or(values.len() - 1))
}
