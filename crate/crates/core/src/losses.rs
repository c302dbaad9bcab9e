//! Inpainting objectives and their gradients with respect to latents.
//!
//! Every `|·|` is an elementwise L1 sum. L1 subgradients use `sign(0) = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{Discriminator, Generator};
use crate::optim::Objective;
use crate::tensor::{grad_x, grad_y, l1_sum, mask_apply, Image, Latent, Mask};

/// Clamp applied to discriminator outputs before taking `log(1 - D)`.
pub const D_CLAMP_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the perceptual term in `J = L_f + lambda * L_p`.
    pub lambda: f64,
    /// Weight of the structure term in `L_nn = L_D + gamma * L_S`.
    pub gamma: f64,
    /// Weight of the group-consistency term in windowed optimization.
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.01,
            gamma: 0.01,
            mu: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("mu", self.mu),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Value and latent gradient of a scalar objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Latent,
}

#[inline]
pub(crate) fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_problem(z: &Latent, image: &Image, mask: &Mask, g: &dyn Generator) -> Result<()> {
    if z.dim() != g.latent_dim() {
        return Err(Error::shape(format!(
            "latent has {} components, generator expects {}",
            z.dim(),
            g.latent_dim()
        )));
    }
    if image.shape() != g.output_shape() {
        return Err(Error::shape(format!(
            "image {} does not match generator output {}",
            image.shape(),
            g.output_shape()
        )));
    }
    mask.check_image(image)
}

/// Fidelity value and the image-space cotangent `-M ⊙ sign(I - G(z))`.
/// Only unmasked pixels of `image` are read.
fn fidelity_terms(generated: &Image, image: &Image, mask: &Mask) -> (f64, Vec<f64>) {
    let c = image.channels();
    let mut value = 0.0;
    let mut cot = vec![0.0; image.data().len()];
    for (i, (&target, &out)) in image.data().iter().zip(generated.data()).enumerate() {
        if mask.data()[i / c] {
            let r = target - out;
            value += r.abs();
            cot[i] = -sign0(r);
        }
    }
    (value, cot)
}

/// Perceptual value `log(1 - clamp(D(x)))` and its image-space cotangent.
fn perceptual_terms(generated: &Image, d: &dyn Discriminator) -> Result<(f64, Image)> {
    if d.input_shape() != generated.shape() {
        return Err(Error::shape(format!(
            "discriminator expects {}, generator produces {}",
            d.input_shape(),
            generated.shape()
        )));
    }
    let p = d.forward(generated)?;
    let clamped = p.clamp(D_CLAMP_EPS, 1.0 - D_CLAMP_EPS);
    let value = (1.0 - clamped).ln();
    // clamp has zero slope outside its range
    let dvalue_dp = if p > D_CLAMP_EPS && p < 1.0 - D_CLAMP_EPS {
        -1.0 / (1.0 - clamped)
    } else {
        0.0
    };
    Ok((value, d.vjp(generated, dvalue_dp)?))
}

/// `L_f = Σ |M ⊙ (I − G(z))|`.
pub fn fidelity_loss(
    z: &Latent,
    image: &Image,
    mask: &Mask,
    g: &dyn Generator,
) -> Result<LossGrad> {
    check_problem(z, image, mask, g)?;
    let generated = g.forward(z)?;
    let (value, cot) = fidelity_terms(&generated, image, mask);
    let grad = g.vjp(z, &Image::from_vec(image.shape(), cot)?)?;
    Ok(LossGrad { value, grad })
}

/// `L_p = log(1 − D(G(z)))` with the discriminator output clamped to
/// `[1e-6, 1 − 1e-6]`.
pub fn perceptual_loss(z: &Latent, g: &dyn Generator, d: &dyn Discriminator) -> Result<LossGrad> {
    let generated = g.forward(z)?;
    let (value, cot) = perceptual_terms(&generated, d)?;
    let grad = g.vjp(z, &cot)?;
    Ok(LossGrad { value, grad })
}

/// `J = L_f + λ L_p`, evaluated with a single generator forward and VJP.
pub fn total_objective(
    z: &Latent,
    image: &Image,
    mask: &Mask,
    g: &dyn Generator,
    d: &dyn Discriminator,
    weights: &LossWeights,
) -> Result<LossGrad> {
    check_problem(z, image, mask, g)?;
    let generated = g.forward(z)?;
    let (mut value, mut cot) = fidelity_terms(&generated, image, mask);
    if weights.lambda != 0.0 {
        let (lp, lp_cot) = perceptual_terms(&generated, d)?;
        value += weights.lambda * lp;
        for (c, p) in cot.iter_mut().zip(lp_cot.data()) {
            *c += weights.lambda * p;
        }
    }
    let grad = g.vjp(z, &Image::from_vec(image.shape(), cot)?)?;
    Ok(LossGrad { value, grad })
}

/// `L_D = Σ |I_d − M ⊙ p|`.
pub fn data_loss(damaged: &Image, mask: &Mask, candidate: &Image) -> Result<f64> {
    l1_sum(damaged, &mask_apply(candidate, mask)?, None)
}

/// `L_S = Σ |∇x I_d − ∇x (M ⊙ p)| + Σ |∇y I_d − ∇y (M ⊙ p)|`.
pub fn structure_loss(damaged: &Image, mask: &Mask, candidate: &Image) -> Result<f64> {
    let masked = mask_apply(candidate, mask)?;
    Ok(l1_sum(&grad_x(damaged)?, &grad_x(&masked)?, None)?
        + l1_sum(&grad_y(damaged)?, &grad_y(&masked)?, None)?)
}

/// `L_nn = L_D + γ L_S`.
pub fn nn_matching_loss(
    damaged: &Image,
    mask: &Mask,
    candidate: &Image,
    gamma: f64,
) -> Result<f64> {
    Ok(data_loss(damaged, mask, candidate)? + gamma * structure_loss(damaged, mask, candidate)?)
}

/// `L_G = Σ_{i<k} ‖z_i − z_k‖₁` over a window of at most `window` latents,
/// with per-latent subgradients.
pub fn group_consistency_loss(zs: &[Latent], window: usize) -> Result<(f64, Vec<Latent>)> {
    if zs.is_empty() || zs.len() > window {
        return Err(Error::shape(format!(
            "group of {} latents outside window 1..={window}",
            zs.len()
        )));
    }
    let dim = zs[0].dim();
    if zs.iter().any(|z| z.dim() != dim) {
        return Err(Error::shape("latents in a group must share a dimension"));
    }
    let mut value = 0.0;
    let mut grads = vec![vec![0.0; dim]; zs.len()];
    for i in 0..zs.len() {
        for k in i + 1..zs.len() {
            #[allow(clippy::needless_range_loop)]
            for j in 0..dim {
                let d = zs[i].as_slice()[j] - zs[k].as_slice()[j];
                value += d.abs();
                let s = sign0(d);
                grads[i][j] += s;
                grads[k][j] -= s;
            }
        }
    }
    let grads = grads
        .into_iter()
        .map(Latent::new)
        .collect::<Result<Vec<_>>>()?;
    Ok((value, grads))
}

/// The single-image objective `J` bound to one damaged image.
pub struct InpaintObjective<'a> {
    pub image: &'a Image,
    pub mask: &'a Mask,
    pub generator: &'a dyn Generator,
    pub discriminator: &'a dyn Discriminator,
    pub weights: LossWeights,
}

impl Objective for InpaintObjective<'_> {
    fn evaluate(&self, z: &Latent) -> Result<(f64, Latent)> {
        let lg = total_objective(
            z,
            self.image,
            self.mask,
            self.generator,
            self.discriminator,
            &self.weights,
        )?;
        Ok((lg.value, lg.grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{sample_latent, BlobGenerator, BlobGeneratorSpec, MlpDiscriminator};
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Discriminator returning a fixed probability, with zero gradient.
    struct Constant(f64, Shape);

    impl Discriminator for Constant {
        fn input_shape(&self) -> Shape {
            self.1
        }
        fn forward(&self, _: &Image) -> Result<f64> {
            Ok(self.0)
        }
        fn vjp(&self, _: &Image, _: f64) -> Result<Image> {
            Image::zeros(self.1)
        }
    }

    fn setup() -> (BlobGenerator, Latent, ChaCha8Rng) {
        let spec = BlobGeneratorSpec {
            blobs: 2,
            height: 10,
            width: 10,
            channels: 1,
            sigma_min: 1.5,
            sigma_max: 4.0,
            amplitude: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = BlobGenerator::new(spec).unwrap();
        let z = sample_latent(&mut rng, g.latent_dim());
        (g, z, rng)
    }

    #[test]
    fn fidelity_zero_at_exact_match() {
        let (g, z, _) = setup();
        let img = g.forward(&z).unwrap();
        let m = Mask::center_hole(10, 10, 0.25).unwrap();
        let lg = fidelity_loss(&z, &img, &m, &g).unwrap();
        assert_eq!(lg.value, 0.0);
        assert!(lg.grad.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fidelity_constant_residual() {
        let (g, z, _) = setup();
        let out = g.forward(&z).unwrap();
        let target = out.map(|v| v + 0.1).unwrap();
        // 50 unmasked pixels: top half known
        let values: Vec<f64> = (0..100).map(|i| if i < 50 { 1.0 } else { 0.0 }).collect();
        let m = Mask::from_values(10, 10, &values).unwrap();
        let lg = fidelity_loss(&z, &target, &m, &g).unwrap();
        assert!((lg.value - 5.0).abs() < 1e-9);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn perceptual_values() {
        let (g, z, _) = setup();
        let shape = g.output_shape();
        let half = perceptual_loss(&z, &g, &Constant(0.5, shape)).unwrap();
        assert!((half.value - 0.5f64.ln()).abs() < 1e-12);
        assert!((half.value + 0.6931).abs() < 1e-4);
        let sat = perceptual_loss(&z, &g, &Constant(1.0, shape)).unwrap();
        assert!((sat.value - 1e-6f64.ln()).abs() < 1e-9);
        assert!((sat.value + 13.8155).abs() < 1e-4);
    }

    #[test]
    fn total_combines_components() {
        let (g, z, mut rng) = setup();
        let d = MlpDiscriminator::random(g.output_shape(), 6, &mut rng).unwrap();
        let img = g.forward(&sample_latent(&mut rng, g.latent_dim())).unwrap();
        let m = Mask::center_hole(10, 10, 0.25).unwrap();

        let f = fidelity_loss(&z, &img, &m, &g).unwrap();
        let zero = LossWeights {
            lambda: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(total_objective(&z, &img, &m, &g, &d, &zero).unwrap(), f);

        let w = LossWeights::default();
        let p = perceptual_loss(&z, &g, &d).unwrap();
        let t = total_objective(&z, &img, &m, &g, &d, &w).unwrap();
        assert!((t.value - (f.value + 0.01 * p.value)).abs() < 1e-12);
        for i in 0..z.dim() {
            let expect = f.grad.as_slice()[i] + 0.01 * p.grad.as_slice()[i];
            assert!((t.grad.as_slice()[i] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn total_arithmetic_example() {
        // L_f = 5.0, L_p = log(0.5): J = 5 + 0.01 * log(0.5)
        let (g, z, _) = setup();
        let out = g.forward(&z).unwrap();
        let target = out.map(|v| v + 0.1).unwrap();
        let values: Vec<f64> = (0..100).map(|i| if i < 50 { 1.0 } else { 0.0 }).collect();
        let m = Mask::from_values(10, 10, &values).unwrap();
        let d = Constant(0.5, g.output_shape());
        let t = total_objective(&z, &target, &m, &g, &d, &LossWeights::default()).unwrap();
        assert!((t.value - 4.9931).abs() < 1e-4);
    }

    #[test]
    fn data_and_structure_examples() {
        let (g, z, _) = setup();
        let p = g.forward(&z).unwrap();
        let m = Mask::center_hole(10, 10, 0.25).unwrap();
        let damaged = mask_apply(&p, &m).unwrap();
        assert_eq!(data_loss(&damaged, &m, &p).unwrap(), 0.0);
        assert_eq!(structure_loss(&damaged, &m, &p).unwrap(), 0.0);
        assert_eq!(
            data_loss(&damaged, &m, &p).unwrap(),
            l1_sum(&damaged, &mask_apply(&p, &m).unwrap(), None).unwrap()
        );

        let shape = Shape::new(2, 5, 1);
        let ones = Mask::ones(2, 5).unwrap();
        let a = Image::filled(shape, 0.1).unwrap();
        let b = Image::filled(shape, 0.3).unwrap();
        assert!((data_loss(&a, &ones, &b).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(structure_loss(&a, &ones, &b).unwrap(), 0.0);
        assert_eq!(
            nn_matching_loss(&a, &ones, &b, 0.0).unwrap(),
            data_loss(&a, &ones, &b).unwrap()
        );
    }

    #[test]
    fn structure_three_by_three_oracle() {
        let shape = Shape::new(3, 3, 1);
        let id =
            Image::from_vec(shape, vec![0.1, 0.4, -0.2, 0.0, 0.0, 0.7, -0.5, 0.3, 0.0]).unwrap();
        let p =
            Image::from_vec(shape, vec![0.2, -0.1, 0.3, 0.9, 0.5, 0.6, -0.4, 0.1, 0.8]).unwrap();
        let m = Mask::from_values(3, 3, &[1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        // hand-unrolled forward differences on the 3x3 grid
        let mp = [0.2, -0.1, 0.3, 0.9, 0.0, 0.6, -0.4, 0.1, 0.0];
        let d = [0.1, 0.4, -0.2, 0.0, 0.0, 0.7, -0.5, 0.3, 0.0];
        let mut oracle = 0.0;
        for y in 0..3 {
            for x in 0..2 {
                let gd = d[y * 3 + x + 1] - d[y * 3 + x];
                let gp = mp[y * 3 + x + 1] - mp[y * 3 + x];
                oracle += f64::abs(gd - gp);
            }
        }
        for y in 0..2 {
            for x in 0..3 {
                let gd = d[(y + 1) * 3 + x] - d[y * 3 + x];
                let gp = mp[(y + 1) * 3 + x] - mp[y * 3 + x];
                oracle += f64::abs(gd - gp);
            }
        }
        assert!((structure_loss(&id, &m, &p).unwrap() - oracle).abs() < 1e-12);

        let gamma = 0.37;
        let total = nn_matching_loss(&id, &m, &p, gamma).unwrap();
        let parts = data_loss(&id, &m, &p).unwrap() + gamma * structure_loss(&id, &m, &p).unwrap();
        assert!((total - parts).abs() < 1e-12);
    }

    #[test]
    fn structure_ignores_common_offset_with_full_mask() {
        let (g, z, mut rng) = setup();
        let a = g.forward(&z).unwrap();
        let b = g.forward(&sample_latent(&mut rng, g.latent_dim())).unwrap();
        let ones = Mask::ones(10, 10).unwrap();
        let base = structure_loss(&a, &ones, &b).unwrap();
        let shifted = structure_loss(
            &a.map(|v| v + 0.3).unwrap(),
            &ones,
            &b.map(|v| v + 0.3).unwrap(),
        )
        .unwrap();
        assert!((base - shifted).abs() < 1e-9);
    }

    #[test]
    fn group_consistency_examples() {
        let l = |v: &[f64]| Latent::new(v.to_vec()).unwrap();
        let (v, g) = group_consistency_loss(&vec![l(&[0.2, 0.1]); 3], 5).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|z| z.as_slice().iter().all(|&x| x == 0.0)));

        let (v, g) = group_consistency_loss(&[l(&[0.0]), l(&[0.4])], 5).unwrap();
        assert!((v - 0.4).abs() < 1e-15);
        assert_eq!(g[0].as_slice(), &[-1.0]);
        assert_eq!(g[1].as_slice(), &[1.0]);

        let (v, _) = group_consistency_loss(&[l(&[0.0]), l(&[1.0]), l(&[2.0])], 5).unwrap();
        assert_eq!(v, 4.0);

        assert!(group_consistency_loss(&[], 5).is_err());
        assert!(group_consistency_loss(&[l(&[0.0]), l(&[0.0, 1.0])], 5).is_err());
        assert!(group_consistency_loss(&vec![l(&[0.0]); 6], 5).is_err());
    }

    #[test]
    fn group_consistency_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zs: Vec<Latent> = (0..5).map(|_| sample_latent(&mut rng, 6)).collect();
        let (v, _) = group_consistency_loss(&zs, 5).unwrap();
        let mut rev = zs.clone();
        rev.reverse();
        rev.swap(1, 3);
        let (w, _) = group_consistency_loss(&rev, 5).unwrap();
        assert!((v - w).abs() < 1e-12);
        assert!(v > 0.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights {
            mu: -1.0,
            ..LossWeights::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            lambda: f64::NAN,
            ..LossWeights::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
