//! Small adversarial trainer producing an MLP generator/discriminator pair on
//! synthetic blob images.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{
    sample_latent, Activation, BlobGenerator, BlobGeneratorSpec, Discriminator, Generator, Mlp,
    MlpDiscriminator, MlpGenerator,
};
use crate::losses::D_CLAMP_EPS;
use crate::optim::Adam;
use crate::tensor::{Image, Latent};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub latent_dim: usize,
    pub hidden_g: usize,
    pub hidden_d: usize,
    pub seed: u64,
    /// Real images are renders of this blob model at uniform latents.
    pub dataset: BlobGeneratorSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            steps: 2000,
            lr_g: 1e-3,
            lr_d: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            latent_dim: 8,
            hidden_g: 64,
            hidden_d: 32,
            seed: 0,
            dataset: BlobGeneratorSpec {
                blobs: 2,
                height: 12,
                width: 12,
                channels: 1,
                sigma_min: 1.5,
                sigma_max: 3.5,
                amplitude: 1.5,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.batch_size == 0 || self.latent_dim == 0 || self.hidden_g == 0 || self.hidden_d == 0
        {
            return Err(Error::Config(
                "batch size, latent dim and hidden sizes must be at least 1".into(),
            ));
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {lr}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Value function `E log D(x) + E log(1 − D(G(z)))`, which D ascends.
    pub d_loss: f64,
    /// `E log(1 − D(G(z)))`, which G descends.
    pub g_loss: f64,
}

fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(D_CLAMP_EPS, 1.0 - D_CLAMP_EPS);
    (c, c == p)
}

/// Generator, discriminator and their optimizer states.
pub struct GanTrainer {
    generator: MlpGenerator,
    discriminator: MlpDiscriminator,
    adam_g: Adam,
    adam_d: Adam,
    steps_taken: usize,
}

impl GanTrainer {
    pub fn new(
        generator: MlpGenerator,
        discriminator: MlpDiscriminator,
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if generator.output_shape() != discriminator.input_shape() {
            return Err(Error::shape(format!(
                "generator emits {}, discriminator expects {}",
                generator.output_shape(),
                discriminator.input_shape()
            )));
        }
        let adam_g = Adam::new(
            generator.net().param_count(),
            config.lr_g,
            config.beta1,
            config.beta2,
            1e-8,
        );
        let adam_d = Adam::new(
            discriminator.net().param_count(),
            config.lr_d,
            config.beta1,
            config.beta2,
            1e-8,
        );
        Ok(GanTrainer {
            generator,
            discriminator,
            adam_g,
            adam_d,
            steps_taken: 0,
        })
    }

    /// Seeded initialization from the config's sizes.
    pub fn initialize(config: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let shape = config.dataset.shape();
        let g_net = Mlp::random(
            &[config.latent_dim, config.hidden_g, shape.len()],
            &[Activation::Tanh, Activation::Tanh],
            rng,
        )?;
        let generator = MlpGenerator::new(g_net, shape)?;
        let discriminator = MlpDiscriminator::random(shape, config.hidden_d, rng)?;
        Self::new(generator, discriminator, config)
    }

    pub fn generator(&self) -> &MlpGenerator {
        &self.generator
    }

    pub fn discriminator(&self) -> &MlpDiscriminator {
        &self.discriminator
    }

    pub fn into_models(self) -> (MlpGenerator, MlpDiscriminator) {
        (self.generator, self.discriminator)
    }

    /// One simultaneous update: both gradients are taken at the current
    /// parameters, then both Adam steps are applied.
    pub fn gan_step(&mut self, real: &[Image], latents: &[Latent]) -> Result<StepStats> {
        let step = self.steps_taken;
        let fail = |reason: String| Error::Training { step, reason };
        if real.is_empty() || latents.is_empty() {
            return Err(Error::Config("gan step needs non-empty batches".into()));
        }
        let shape = self.discriminator.input_shape();
        if let Some(bad) = real.iter().find(|x| x.shape() != shape) {
            return Err(Error::shape(format!(
                "real image {} does not match {shape}",
                bad.shape()
            )));
        }
        if let Some(bad) = latents
            .iter()
            .find(|z| z.dim() != self.generator.latent_dim())
        {
            return Err(Error::shape(format!(
                "latent has {} dims, generator takes {}",
                bad.dim(),
                self.generator.latent_dim()
            )));
        }

        let d_net = self.discriminator.net();
        let g_net = self.generator.net();
        let mut grad_d = vec![0.0; d_net.param_count()];
        let mut grad_g = vec![0.0; g_net.param_count()];
        let mut v_real = 0.0;
        let mut v_fake = 0.0;

        let n_real = real.len() as f64;
        for x in real {
            let trace = d_net.forward_trace(x.data())?;
            let (p, inside) = clamp_prob(trace.output()[0]);
            v_real += p.ln() / n_real;
            // Minimize −V.
            let cot = if inside { -1.0 / (p * n_real) } else { 0.0 };
            d_net.backward(&trace, &[cot], Some(&mut grad_d))?;
        }

        let n_fake = latents.len() as f64;
        for z in latents {
            let g_trace = g_net.forward_trace(z.as_slice())?;
            let d_trace = d_net.forward_trace(g_trace.output())?;
            let (p, inside) = clamp_prob(d_trace.output()[0]);
            v_fake += (1.0 - p).ln() / n_fake;
            let dlog = if inside {
                -1.0 / ((1.0 - p) * n_fake)
            } else {
                0.0
            };
            // −V contributes −dlog for D; G descends +dlog.
            d_net.backward(&d_trace, &[-dlog], Some(&mut grad_d))?;
            let image_cot = d_net.backward(&d_trace, &[dlog], None)?;
            g_net.backward(&g_trace, &image_cot, Some(&mut grad_g))?;
        }

        let stats = StepStats {
            d_loss: v_real + v_fake,
            g_loss: v_fake,
        };
        if !stats.d_loss.is_finite() || !stats.g_loss.is_finite() {
            return Err(fail(format!(
                "non-finite loss (d {}, g {})",
                stats.d_loss, stats.g_loss
            )));
        }
        if grad_d.iter().chain(&grad_g).any(|g| !g.is_finite()) {
            return Err(fail("non-finite gradient".into()));
        }

        let mut pd = d_net.params();
        let mut pg = g_net.params();
        self.adam_d.step(&mut pd, &grad_d);
        self.adam_g.step(&mut pg, &grad_g);
        if pd.iter().chain(&pg).any(|p| !p.is_finite()) {
            return Err(fail("non-finite parameters after update".into()));
        }
        self.discriminator.net_mut().set_params(&pd)?;
        self.generator.net_mut().set_params(&pg)?;
        self.steps_taken += 1;
        Ok(stats)
    }
}

/// Renders `n` real samples from the blob dataset.
pub fn sample_real(dataset: &BlobGenerator, n: usize, rng: &mut impl Rng) -> Result<Vec<Image>> {
    (0..n)
        .map(|_| dataset.forward(&sample_latent(rng, dataset.latent_dim())))
        .collect()
}

pub struct TrainOutcome {
    pub generator: MlpGenerator,
    pub discriminator: MlpDiscriminator,
    pub history: Vec<StepStats>,
}

impl TrainOutcome {
    /// Writes `generator.json`/`.lgw` and `discriminator.json`/`.lgw` into
    /// `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.generator.save(&dir.join("generator.json"))?;
        self.discriminator.save(&dir.join("discriminator.json"))
    }
}

/// Runs `config.steps` simultaneous updates from a seeded initialization.
/// With `steps = 0` the initial networks are returned.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dataset = BlobGenerator::new(config.dataset.clone())?;
    let mut trainer = GanTrainer::initialize(config, &mut rng)?;
    let mut history = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let real = sample_real(&dataset, config.batch_size, &mut rng)?;
        let latents: Vec<Latent> = (0..config.batch_size)
            .map(|_| sample_latent(&mut rng, config.latent_dim))
            .collect();
        history.push(trainer.gan_step(&real, &latents)?);
    }
    let (generator, discriminator) = trainer.into_models();
    Ok(TrainOutcome {
        generator,
        discriminator,
        history,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    /// Fraction of held-out real and generated samples D classifies
    /// correctly at threshold 0.5.
    pub d_accuracy: f64,
    pub g_loss: f64,
}

/// Scores a generator against a discriminator on fresh samples.
pub fn evaluate(
    generator: &dyn Generator,
    discriminator: &MlpDiscriminator,
    dataset: &BlobGeneratorSpec,
    samples: usize,
    seed: u64,
) -> Result<Evaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = BlobGenerator::new(dataset.clone())?;
    let mut correct = 0usize;
    let mut g_loss = 0.0;
    for x in sample_real(&data, samples, &mut rng)? {
        if discriminator.forward(&x)? > 0.5 {
            correct += 1;
        }
    }
    for _ in 0..samples {
        let fake = generator.forward(&sample_latent(&mut rng, generator.latent_dim()))?;
        let (p, _) = clamp_prob(discriminator.forward(&fake)?);
        if p < 0.5 {
            correct += 1;
        }
        g_loss += (1.0 - p).ln() / samples as f64;
    }
    Ok(Evaluation {
        d_accuracy: correct as f64 / (2 * samples) as f64,
        g_loss,
    })
}
