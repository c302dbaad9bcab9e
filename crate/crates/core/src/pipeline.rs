//! Single-image inpainting and the frame-sequence scheduler.
//!
//! Sequences are cut into consecutive windows of `window` frames. The first
//! frame of each window (the pivot) gets the full single-image search; every
//! other frame starts from the previous frame's solution with a reduced
//! budget. In `reuse+group` mode each window is then refined jointly under the
//! group-consistency term.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::generators::{sample_latent, Discriminator, Generator};
use crate::losses::{InpaintObjective, LossWeights};
use crate::optim::{optimize_single, optimize_window, Objective, OptimConfig, Trajectory};
use crate::pool::{nn_init, Pool};
use crate::tensor::{mask_apply, Image, Latent, Mask};

/// Default pivot spacing and group-consistency window.
pub const DEFAULT_WINDOW: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    Random,
    Pool,
}

/// How pivots after the first are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PivotInit {
    /// Start from the previous pivot's solution.
    PreviousPivot,
    /// Use the configured strategy (random or pool) again.
    Configured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintConfig {
    pub weights: LossWeights,
    pub optim: OptimConfig,
    pub init: InitStrategy,
    pub window: usize,
    /// Budget for warm-started frames; `None` means `max_iters / 10`.
    pub nonpivot_iters: Option<usize>,
    /// Budget for the joint window refinement; `None` means the non-pivot
    /// budget.
    pub group_iters: Option<usize>,
    pub pivot_init: PivotInit,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        InpaintConfig {
            weights: LossWeights::default(),
            optim: OptimConfig::default(),
            init: InitStrategy::Pool,
            window: DEFAULT_WINDOW,
            nonpivot_iters: None,
            group_iters: None,
            pivot_init: PivotInit::PreviousPivot,
        }
    }
}

impl InpaintConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.optim.validate()?;
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if self.nonpivot_iters == Some(0) || self.group_iters == Some(0) {
            return Err(Error::Config("iteration budgets must be at least 1".into()));
        }
        Ok(())
    }

    pub fn nonpivot_budget(&self) -> usize {
        self.nonpivot_iters
            .unwrap_or(self.optim.max_iters / 10)
            .max(1)
    }

    pub fn group_budget(&self) -> usize {
        self.group_iters.unwrap_or_else(|| self.nonpivot_budget())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Random,
    Pool,
    Reuse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitInfo {
    pub strategy: InitKind,
    pub pool_index: Option<usize>,
    pub nn_loss: Option<f64>,
    /// Frame whose solution seeded this one (reuse only).
    pub source_frame: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintResult {
    pub image: Image,
    pub z_hat: Latent,
    pub trajectory: Trajectory,
    pub init: InitInfo,
    /// Joint window trajectory when the frame took part in group refinement.
    pub refinement: Option<Trajectory>,
}

impl InpaintResult {
    pub fn iterations_to_saturation(&self) -> usize {
        self.trajectory
            .iterations_to_saturation(0.95)
            .expect("trajectories are non-empty")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SequenceMode {
    #[serde(rename = "independent")]
    Independent,
    #[serde(rename = "reuse")]
    Reuse,
    #[serde(rename = "reuse+group")]
    ReuseGroup,
}

impl SequenceMode {
    pub const ALL: [SequenceMode; 3] = [
        SequenceMode::Independent,
        SequenceMode::Reuse,
        SequenceMode::ReuseGroup,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SequenceMode::Independent => "independent",
            SequenceMode::Reuse => "reuse",
            SequenceMode::ReuseGroup => "reuse+group",
        }
    }
}

impl fmt::Display for SequenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SequenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(SequenceMode::Independent),
            "reuse" => Ok(SequenceMode::Reuse),
            "reuse+group" | "reuse-group" => Ok(SequenceMode::ReuseGroup),
            other => Err(Error::Config(format!("unknown sequence mode {other:?}"))),
        }
    }
}

/// Composite from an already generated image.
pub fn blend_generated(image: &Image, mask: &Mask, generated: &Image) -> Result<Image> {
    mask.check_image(image)?;
    crate::tensor::ensure_same_shape(image, generated)?;
    let c = image.channels();
    let data = image
        .data()
        .iter()
        .zip(generated.data())
        .enumerate()
        .map(|(i, (&known, &gen))| if mask.data()[i / c] { known } else { gen })
        .collect();
    Image::from_vec(image.shape(), data)
}

/// `Î = M ⊙ I + (1 − M) ⊙ G(ẑ)`.
pub fn blend(
    image: &Image,
    mask: &Mask,
    generator: &dyn Generator,
    z_hat: &Latent,
) -> Result<Image> {
    blend_generated(image, mask, &generator.forward(z_hat)?)
}

struct Models<'a> {
    generator: &'a dyn Generator,
    discriminator: &'a dyn Discriminator,
}

fn configured_init(
    damaged: &Image,
    mask: &Mask,
    models: &Models<'_>,
    pool: Option<&Pool>,
    config: &InpaintConfig,
    seed: u64,
    exec: Exec,
) -> Result<(Latent, InitInfo)> {
    match config.init {
        InitStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((
                sample_latent(&mut rng, models.generator.latent_dim()),
                InitInfo {
                    strategy: InitKind::Random,
                    pool_index: None,
                    nn_loss: None,
                    source_frame: None,
                },
            ))
        }
        InitStrategy::Pool => {
            let pool =
                pool.ok_or_else(|| Error::Config("pool initialization requires a pool".into()))?;
            if pool.fingerprint() != models.generator.fingerprint() {
                return Err(Error::Integrity(
                    "pool was built by a different generator".into(),
                ));
            }
            let m = nn_init(damaged, mask, pool, config.weights.gamma, exec)?;
            Ok((
                m.latent,
                InitInfo {
                    strategy: InitKind::Pool,
                    pool_index: Some(m.index),
                    nn_loss: Some(m.loss),
                    source_frame: None,
                },
            ))
        }
    }
}

fn objective_for<'a>(
    damaged: &'a Image,
    mask: &'a Mask,
    models: &Models<'a>,
    weights: LossWeights,
) -> InpaintObjective<'a> {
    InpaintObjective {
        image: damaged,
        mask,
        generator: models.generator,
        discriminator: models.discriminator,
        weights,
    }
}

#[allow(clippy::too_many_arguments)]
fn search_from(
    image: &Image,
    damaged: &Image,
    mask: &Mask,
    models: &Models<'_>,
    z0: Latent,
    init: InitInfo,
    weights: LossWeights,
    optim: &OptimConfig,
) -> Result<InpaintResult> {
    let objective = objective_for(damaged, mask, models, weights);
    let (z_hat, trajectory) = optimize_single(&z0, &objective, optim)?;
    Ok(InpaintResult {
        image: blend(image, mask, models.generator, &z_hat)?,
        z_hat,
        trajectory,
        init,
        refinement: None,
    })
}

fn check_models(image: &Image, mask: &Mask, models: &Models<'_>) -> Result<()> {
    mask.check_image(image)?;
    if image.shape() != models.generator.output_shape() {
        return Err(Error::shape(format!(
            "image {} does not match generator output {}",
            image.shape(),
            models.generator.output_shape()
        )));
    }
    if models.discriminator.input_shape() != image.shape() {
        return Err(Error::shape(format!(
            "discriminator expects {}, image is {}",
            models.discriminator.input_shape(),
            image.shape()
        )));
    }
    Ok(())
}

/// Inpaints one image: initialize (random or pool), run the latent search,
/// blend. The search only ever sees `M ⊙ I`.
pub fn inpaint_image(
    image: &Image,
    mask: &Mask,
    generator: &dyn Generator,
    discriminator: &dyn Discriminator,
    pool: Option<&Pool>,
    config: &InpaintConfig,
    exec: Exec,
) -> Result<InpaintResult> {
    config.validate()?;
    let models = Models {
        generator,
        discriminator,
    };
    check_models(image, mask, &models)?;
    let damaged = mask_apply(image, mask)?;
    let (z0, init) = configured_init(
        &damaged,
        mask,
        &models,
        pool,
        config,
        config.optim.seed,
        exec,
    )?;
    search_from(
        image,
        &damaged,
        mask,
        &models,
        z0,
        init,
        config.weights,
        &config.optim,
    )
}

fn frame_seed(config: &InpaintConfig, frame: usize) -> u64 {
    config.optim.seed.wrapping_add(frame as u64)
}

/// Inpaints a frame sequence. Frame `t` uses seed `optim.seed + t` for any
/// random initialization.
pub fn inpaint_sequence(
    frames: &[(Image, Mask)],
    generator: &dyn Generator,
    discriminator: &dyn Discriminator,
    pool: Option<&Pool>,
    config: &InpaintConfig,
    mode: SequenceMode,
    exec: Exec,
) -> Result<Vec<InpaintResult>> {
    config.validate()?;
    let first = frames
        .first()
        .ok_or_else(|| Error::Sequence("sequence has no frames".into()))?;
    for (t, (img, mask)) in frames.iter().enumerate() {
        if img.shape() != first.0.shape() {
            return Err(Error::Sequence(format!(
                "frame {t} has shape {}, expected {}",
                img.shape(),
                first.0.shape()
            )));
        }
        mask.check_image(img)
            .map_err(|e| e.context(format!("frame {t}")))?;
    }
    let models = Models {
        generator,
        discriminator,
    };
    check_models(&first.0, &first.1, &models)?;

    if mode == SequenceMode::Independent {
        return exec
            .map_range(frames.len(), |t| {
                let (image, mask) = &frames[t];
                let config = InpaintConfig {
                    optim: OptimConfig {
                        seed: frame_seed(config, t),
                        ..config.optim.clone()
                    },
                    ..config.clone()
                };
                inpaint_image(
                    image,
                    mask,
                    generator,
                    discriminator,
                    pool,
                    &config,
                    Exec::Sequential,
                )
                .map_err(|e| e.context(format!("frame {t}")))
            })
            .into_iter()
            .collect();
    }

    let damaged: Vec<Image> = frames
        .iter()
        .map(|(img, m)| mask_apply(img, m))
        .collect::<Result<_>>()?;
    let warm_optim = config.optim.with_iters(config.nonpivot_budget());
    let mut results: Vec<InpaintResult> = Vec::with_capacity(frames.len());
    let mut previous_pivot: Option<usize> = None;

    for start in (0..frames.len()).step_by(config.window) {
        let end = (start + config.window).min(frames.len());
        for t in start..end {
            let (image, mask) = &frames[t];
            let (z0, init, optim) = if t == start {
                match (previous_pivot, config.pivot_init) {
                    (Some(p), PivotInit::PreviousPivot) => (
                        results[p].z_hat.clone(),
                        reuse_info(p),
                        config.optim.clone(),
                    ),
                    _ => {
                        let (z0, info) = configured_init(
                            &damaged[t],
                            mask,
                            &models,
                            pool,
                            config,
                            frame_seed(config, t),
                            exec,
                        )?;
                        (z0, info, config.optim.clone())
                    }
                }
            } else {
                (
                    results[t - 1].z_hat.clone(),
                    reuse_info(t - 1),
                    warm_optim.clone(),
                )
            };
            let result = search_from(
                image,
                &damaged[t],
                mask,
                &models,
                z0,
                init,
                config.weights,
                &optim,
            )
            .map_err(|e| e.context(format!("frame {t}")))?;
            results.push(result);
        }

        // L_G is vacuous for mu = 0 or a single frame; the joint pass is skipped.
        if mode == SequenceMode::ReuseGroup && config.weights.mu > 0.0 && end - start > 1 {
            refine_window(frames, &damaged, start..end, &models, config, &mut results)?;
        }
        previous_pivot = Some(start);
    }
    Ok(results)
}

fn reuse_info(source: usize) -> InitInfo {
    InitInfo {
        strategy: InitKind::Reuse,
        pool_index: None,
        nn_loss: None,
        source_frame: Some(source),
    }
}

fn refine_window(
    frames: &[(Image, Mask)],
    damaged: &[Image],
    range: std::ops::Range<usize>,
    models: &Models<'_>,
    config: &InpaintConfig,
    results: &mut [InpaintResult],
) -> Result<()> {
    let objectives: Vec<InpaintObjective<'_>> = range
        .clone()
        .map(|t| objective_for(&damaged[t], &frames[t].1, models, config.weights))
        .collect();
    let refs: Vec<&dyn Objective> = objectives.iter().map(|o| o as &dyn Objective).collect();
    let inits: Vec<Latent> = range.clone().map(|t| results[t].z_hat.clone()).collect();
    let (z_hats, trajectory) = optimize_window(
        &inits,
        &refs,
        config.weights.mu,
        &config.optim.with_iters(config.group_budget()),
    )
    .map_err(|e| e.context(format!("window starting at frame {}", range.start)))?;
    for (t, z_hat) in range.zip(z_hats) {
        let (image, mask) = &frames[t];
        results[t].image = blend(image, mask, models.generator, &z_hat)?;
        results[t].z_hat = z_hat;
        results[t].refinement = Some(trajectory.clone());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{BlobGenerator, BlobGeneratorSpec, MlpDiscriminator};
    use crate::pool::build_pool;
    use crate::tensor::Shape;

    fn models() -> (BlobGenerator, MlpDiscriminator) {
        let g = BlobGenerator::new(BlobGeneratorSpec {
            blobs: 2,
            height: 12,
            width: 12,
            channels: 1,
            sigma_min: 1.5,
            sigma_max: 4.0,
            amplitude: 1.2,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = MlpDiscriminator::random(g.output_shape(), 8, &mut rng).unwrap();
        (g, d)
    }

    fn quick() -> InpaintConfig {
        InpaintConfig {
            optim: OptimConfig::default().with_iters(60),
            init: InitStrategy::Random,
            ..InpaintConfig::default()
        }
    }

    #[test]
    fn blend_cases() {
        let shape = Shape::new(2, 2, 1);
        let img = Image::from_vec(shape, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let gen = Image::from_vec(shape, vec![-0.5, -0.6, -0.7, -0.8]).unwrap();
        let ones = Mask::ones(2, 2).unwrap();
        assert_eq!(blend_generated(&img, &ones, &gen).unwrap(), img);
        let m = Mask::from_values(2, 2, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(
            blend_generated(&img, &m, &gen).unwrap().data(),
            &[0.1, -0.6, -0.7, 0.4]
        );
    }

    #[test]
    fn pool_init_requires_pool() {
        let (g, d) = models();
        let img = g.forward(&Latent::zeros(g.latent_dim())).unwrap();
        let mask = Mask::center_hole(12, 12, 0.25).unwrap();
        let config = InpaintConfig {
            init: InitStrategy::Pool,
            ..quick()
        };
        assert!(inpaint_image(&img, &mask, &g, &d, None, &config, Exec::default()).is_err());
        let pool = build_pool(&g, 10, 0, Exec::default()).unwrap();
        let r = inpaint_image(&img, &mask, &g, &d, Some(&pool), &config, Exec::default()).unwrap();
        assert_eq!(r.init.strategy, InitKind::Pool);
        assert!(r.init.pool_index.is_some());
    }

    #[test]
    fn lambda_zero_is_pure_fidelity() {
        let (g, d) = models();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = g.forward(&sample_latent(&mut rng, g.latent_dim())).unwrap();
        let mask = Mask::center_hole(12, 12, 0.25).unwrap();
        let config = InpaintConfig {
            weights: LossWeights {
                lambda: 0.0,
                ..LossWeights::default()
            },
            ..quick()
        };
        let r = inpaint_image(&img, &mask, &g, &d, None, &config, Exec::default()).unwrap();
        let z0 = sample_latent(
            &mut ChaCha8Rng::seed_from_u64(config.optim.seed),
            g.latent_dim(),
        );
        let damaged = mask_apply(&img, &mask).unwrap();
        let fidelity = |z: &Latent| {
            crate::losses::fidelity_loss(z, &damaged, &mask, &g).map(|lg| (lg.value, lg.grad))
        };
        let (z_hat, _) = optimize_single(&z0, &fidelity, &config.optim).unwrap();
        assert_eq!(r.z_hat, z_hat);
    }

    #[test]
    fn single_frame_sequence_matches_image() {
        let (g, d) = models();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = g.forward(&sample_latent(&mut rng, g.latent_dim())).unwrap();
        let mask = Mask::center_hole(12, 12, 0.25).unwrap();
        let config = quick();
        let single = inpaint_image(&img, &mask, &g, &d, None, &config, Exec::default()).unwrap();
        for mode in SequenceMode::ALL {
            let seq = inpaint_sequence(
                &[(img.clone(), mask.clone())],
                &g,
                &d,
                None,
                &config,
                mode,
                Exec::default(),
            )
            .unwrap();
            assert_eq!(seq.len(), 1);
            assert_eq!(seq[0], single, "{mode}");
        }
    }

    #[test]
    fn reuse_chains_frames_and_pivots() {
        let (g, d) = models();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = g.forward(&sample_latent(&mut rng, g.latent_dim())).unwrap();
        let mask = Mask::center_hole(12, 12, 0.25).unwrap();
        let frames = vec![(img, mask); 7];
        let config = InpaintConfig {
            window: 3,
            ..quick()
        };
        let out = inpaint_sequence(
            &frames,
            &g,
            &d,
            None,
            &config,
            SequenceMode::Reuse,
            Exec::default(),
        )
        .unwrap();
        assert_eq!(out[0].init.strategy, InitKind::Random);
        assert_eq!(out[1].init.source_frame, Some(0));
        assert_eq!(out[1].trajectory.iterations(), 6);
        assert_eq!(out[3].init.source_frame, Some(0));
        assert_eq!(out[3].trajectory.iterations(), 60);
        assert_eq!(out[6].init.source_frame, Some(3));

        let configured = InpaintConfig {
            pivot_init: PivotInit::Configured,
            ..config.clone()
        };
        let out = inpaint_sequence(
            &frames,
            &g,
            &d,
            None,
            &configured,
            SequenceMode::Reuse,
            Exec::default(),
        )
        .unwrap();
        assert_eq!(out[3].init.strategy, InitKind::Random);
    }

    #[test]
    fn group_mode_with_zero_mu_matches_reuse() {
        let (g, d) = models();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames: Vec<(Image, Mask)> = (0..6)
            .map(|_| {
                let img = g.forward(&sample_latent(&mut rng, g.latent_dim())).unwrap();
                (img, Mask::center_hole(12, 12, 0.2).unwrap())
            })
            .collect();
        let config = InpaintConfig {
            weights: LossWeights {
                mu: 0.0,
                ..LossWeights::default()
            },
            ..quick()
        };
        let a = inpaint_sequence(
            &frames,
            &g,
            &d,
            None,
            &config,
            SequenceMode::Reuse,
            Exec::default(),
        )
        .unwrap();
        let b = inpaint_sequence(
            &frames,
            &g,
            &d,
            None,
            &config,
            SequenceMode::ReuseGroup,
            Exec::default(),
        )
        .unwrap();
        assert_eq!(a, b);

        let grouped = InpaintConfig {
            weights: LossWeights::default(),
            ..config
        };
        let c = inpaint_sequence(
            &frames,
            &g,
            &d,
            None,
            &grouped,
            SequenceMode::ReuseGroup,
            Exec::default(),
        )
        .unwrap();
        assert!(c[0].refinement.is_some());
        assert!(c[5].refinement.is_none() || c[5].refinement.as_ref().unwrap().iterations() > 0);
    }

    #[test]
    fn shape_drift_rejected() {
        let (g, d) = models();
        let img = g.forward(&Latent::zeros(g.latent_dim())).unwrap();
        let other = Image::zeros(Shape::new(12, 10, 1)).unwrap();
        let frames = vec![
            (img, Mask::ones(12, 12).unwrap()),
            (other, Mask::ones(12, 10).unwrap()),
        ];
        assert!(inpaint_sequence(
            &frames,
            &g,
            &d,
            None,
            &quick(),
            SequenceMode::Reuse,
            Exec::default()
        )
        .is_err());
        assert!(inpaint_sequence(
            &[],
            &g,
            &d,
            None,
            &quick(),
            SequenceMode::Reuse,
            Exec::default()
        )
        .is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in SequenceMode::ALL {
            assert_eq!(m.as_str().parse::<SequenceMode>().unwrap(), m);
        }
        assert!("both".parse::<SequenceMode>().is_err());
    }
}
