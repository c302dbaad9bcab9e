//! Seeded benchmark corpora: single-image random vs pool initialization,
//! drifting-latent sequences, and pseudo-sequences for temporal consistency.
//!
//! Every case derives its own seed from the run seed, so results do not
//! depend on scheduling. A failing case is recorded with its error and left
//! out of the aggregates.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::generators::{
    sample_latent, BlobGenerator, BlobGeneratorSpec, Discriminator, Generator, MlpDiscriminator,
};
use crate::io::write_text;
use crate::losses::LossWeights;
use crate::metrics::{flicker, make_pseudo_sequence, psnr, temporal_consistency_eta, MaskGenSpec};
use crate::optim::OptimConfig;
use crate::pipeline::{
    inpaint_image, inpaint_sequence, InitStrategy, InpaintConfig, InpaintResult, SequenceMode,
    DEFAULT_WINDOW,
};
use crate::pool::{build_pool, Pool, DEFAULT_POOL_SIZE};
use crate::tensor::{Image, Latent, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub seed: u64,
    pub weights: LossWeights,
    pub optim: OptimConfig,
    pub window: usize,
    pub nonpivot_iters: Option<usize>,
    /// Initialization for pivots and for independent frames.
    pub sequence_init: InitStrategy,
    pub hole_fraction: f64,
    pub single_cases: usize,
    pub video_sequences: usize,
    pub video_frames: usize,
    /// Per-frame latent steps are uniform in `[-drift, drift]`.
    pub video_drift: f64,
    pub pseudo_sequences: usize,
    pub pseudo_length: usize,
    pub pseudo_masks: MaskGenSpec,
    /// Built-in models, used when no model files are supplied.
    pub builtin: BuiltinModels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuiltinModels {
    pub generator: BlobGeneratorSpec,
    pub discriminator_hidden: usize,
    pub discriminator_seed: u64,
    pub pool_size: usize,
    pub pool_seed: u64,
}

impl Default for BuiltinModels {
    fn default() -> Self {
        BuiltinModels {
            generator: BlobGeneratorSpec {
                blobs: 1,
                height: 24,
                width: 24,
                channels: 1,
                sigma_min: 2.5,
                sigma_max: 7.0,
                amplitude: 1.5,
            },
            discriminator_hidden: 32,
            discriminator_seed: 7,
            pool_size: DEFAULT_POOL_SIZE,
            pool_seed: 1,
        }
    }
}

impl BuiltinModels {
    pub fn build(&self, exec: Exec) -> Result<(BlobGenerator, MlpDiscriminator, Pool)> {
        let generator = BlobGenerator::new(self.generator.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.discriminator_seed);
        let discriminator = MlpDiscriminator::random(
            generator.output_shape(),
            self.discriminator_hidden,
            &mut rng,
        )?;
        let pool = build_pool(&generator, self.pool_size, self.pool_seed, exec)?;
        Ok((generator, discriminator, pool))
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seed: 0,
            weights: LossWeights::default(),
            optim: OptimConfig::default(),
            window: DEFAULT_WINDOW,
            nonpivot_iters: None,
            sequence_init: InitStrategy::Random,
            hole_fraction: 0.25,
            single_cases: 50,
            video_sequences: 10,
            video_frames: 10,
            video_drift: 0.03,
            pseudo_sequences: 20,
            pseudo_length: 5,
            pseudo_masks: MaskGenSpec::default(),
            builtin: BuiltinModels::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.inpaint_config(InitStrategy::Random).validate()?;
        self.pseudo_masks.validate()?;
        if !(self.hole_fraction > 0.0 && self.hole_fraction < 1.0) {
            return Err(Error::Config("hole fraction must lie in (0, 1)".into()));
        }
        if !(self.video_drift.is_finite() && self.video_drift >= 0.0) {
            return Err(Error::Config(
                "video drift must be finite and non-negative".into(),
            ));
        }
        if self.video_sequences > 0 && self.video_frames == 0 {
            return Err(Error::Config(
                "video sequences need at least one frame".into(),
            ));
        }
        if self.pseudo_sequences > 0 && self.pseudo_length < 2 {
            return Err(Error::Config(
                "pseudo-sequences need at least 2 frames".into(),
            ));
        }
        Ok(())
    }

    fn inpaint_config(&self, init: InitStrategy) -> InpaintConfig {
        InpaintConfig {
            weights: self.weights,
            optim: self.optim.clone(),
            init,
            window: self.window,
            nonpivot_iters: self.nonpivot_iters,
            ..InpaintConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Corpus {
    Single = 1,
    Video = 2,
    Pseudo = 3,
}

/// Independent seed per (run, corpus, case).
fn case_seed(seed: u64, corpus: Corpus, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(corpus as u64);
    rng.set_word_pos(2 * index as u128);
    rng.gen()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SingleCase {
    pub case: usize,
    pub seed: u64,
    pub random_iters: usize,
    pub pool_iters: usize,
    /// Random-init iterations over pool-init iterations (denominator at
    /// least 1).
    pub speedup: f64,
    pub random_psnr: f64,
    pub pool_psnr: f64,
    pub pool_index: usize,
    pub nn_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameRow {
    pub sequence: usize,
    pub mode: SequenceMode,
    pub frame: usize,
    pub pivot: bool,
    pub iters: usize,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceRow {
    /// `video` or `pseudo`.
    pub corpus: &'static str,
    pub sequence: usize,
    pub mode: SequenceMode,
    pub eta: f64,
    pub flicker: f64,
    pub mean_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseError {
    pub corpus: String,
    pub case: usize,
    pub error: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Linear-interpolation quantile over sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Quartiles {
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SingleSummary {
    pub cases: usize,
    pub failed: usize,
    pub speedup: Option<Quartiles>,
    pub random_iters: Option<Quartiles>,
    pub pool_iters: Option<Quartiles>,
    pub random_psnr: Option<Quartiles>,
    pub pool_psnr: Option<Quartiles>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeSummary {
    pub mode: SequenceMode,
    /// Per-frame iterations; for warm-started modes only non-pivot frames.
    pub iters: Option<Quartiles>,
    pub mean_eta: Option<f64>,
    pub mean_flicker: Option<f64>,
    pub mean_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VideoSummary {
    pub sequences: usize,
    pub failed: usize,
    pub modes: Vec<ModeSummary>,
    /// Median reuse non-pivot iterations over median independent iterations.
    pub reuse_to_independent: Option<f64>,
}

/// One-sided paired comparison of per-sequence η.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_difference: f64,
    pub std_difference: f64,
    /// Lower end of the one-sided 95% confidence interval.
    pub lower_95: f64,
    pub significant: bool,
}

/// Paired test of `a − b > 0`.
pub fn paired_lower_bound(a: &[f64], b: &[f64]) -> Option<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .ok()?
        .inverse_cdf(0.95);
    let lower = mean - t * sd / (n as f64).sqrt();
    Some(PairedTest {
        n,
        mean_difference: mean,
        std_difference: sd,
        lower_95: lower,
        significant: lower > 0.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PseudoSummary {
    pub sequences: usize,
    pub failed: usize,
    pub modes: Vec<ModeSummary>,
    pub group_vs_independent: Option<PairedTest>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelInfo {
    pub generator: String,
    pub discriminator_input: String,
    pub pool_size: usize,
    pub pool_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub config: BenchConfig,
    pub models: ModelInfo,
    pub single: SingleSummary,
    pub video: VideoSummary,
    pub pseudo: PseudoSummary,
    pub errors: Vec<CaseError>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub single: Vec<SingleCase>,
    pub video_frames: Vec<FrameRow>,
    pub video_sequences: Vec<SequenceRow>,
    pub pseudo_sequences: Vec<SequenceRow>,
    pub summary: Summary,
}

impl BenchReport {
    pub fn single_csv(&self) -> Result<String> {
        to_csv(&self.single)
    }

    pub fn frames_csv(&self) -> Result<String> {
        to_csv(&self.video_frames)
    }

    /// Video rows first, then pseudo-sequence rows.
    pub fn sequences_csv(&self) -> Result<String> {
        to_csv(self.video_sequences.iter().chain(&self.pseudo_sequences))
    }

    pub fn summary_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(&self.summary)
            .map_err(|e| Error::Config(format!("cannot serialize summary: {e}")))?;
        text.push('\n');
        Ok(text)
    }

    /// Writes `single.csv`, `frames.csv`, `sequences.csv` and
    /// `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("single.csv"), &self.single_csv()?)?;
        write_text(&dir.join("frames.csv"), &self.frames_csv()?)?;
        write_text(&dir.join("sequences.csv"), &self.sequences_csv()?)?;
        write_text(&dir.join("summary.json"), &self.summary_json()?)
    }
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let fail = |e: &dyn std::fmt::Display| Error::Config(format!("cannot write csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| fail(&e))?;
    }
    let bytes = w.into_inner().map_err(|e| fail(&e))?;
    String::from_utf8(bytes).map_err(|e| fail(&e))
}

struct Models<'a> {
    generator: &'a dyn Generator,
    discriminator: &'a dyn Discriminator,
    pool: &'a Pool,
}

fn single_case(
    m: &Models<'_>,
    config: &BenchConfig,
    mask: &Mask,
    case: usize,
) -> Result<SingleCase> {
    let seed = case_seed(config.seed, Corpus::Single, case);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = m
        .generator
        .forward(&sample_latent(&mut rng, m.generator.latent_dim()))?;
    let mut ic = config.inpaint_config(InitStrategy::Random);
    ic.optim.seed = rng.gen();
    let random = inpaint_image(
        &truth,
        mask,
        m.generator,
        m.discriminator,
        None,
        &ic,
        Exec::Sequential,
    )?;
    ic.init = InitStrategy::Pool;
    let pooled = inpaint_image(
        &truth,
        mask,
        m.generator,
        m.discriminator,
        Some(m.pool),
        &ic,
        Exec::Sequential,
    )?;
    let random_iters = random.iterations_to_saturation();
    let pool_iters = pooled.iterations_to_saturation();
    Ok(SingleCase {
        case,
        seed,
        random_iters,
        pool_iters,
        speedup: random_iters as f64 / pool_iters.max(1) as f64,
        random_psnr: psnr(&random.image, &truth)?,
        pool_psnr: psnr(&pooled.image, &truth)?,
        pool_index: pooled.init.pool_index.unwrap_or(0),
        nn_loss: pooled.init.nn_loss.unwrap_or(f64::NAN),
    })
}

fn run_modes(
    m: &Models<'_>,
    config: &BenchConfig,
    frames: &[(Image, Mask)],
    truths: &[Image],
    optim_seed: u64,
) -> Result<Vec<(SequenceMode, Vec<InpaintResult>)>> {
    let mut ic = config.inpaint_config(config.sequence_init);
    ic.optim.seed = optim_seed;
    SequenceMode::ALL
        .iter()
        .map(|&mode| {
            let out = inpaint_sequence(
                frames,
                m.generator,
                m.discriminator,
                Some(m.pool),
                &ic,
                mode,
                Exec::Sequential,
            )?;
            debug_assert_eq!(out.len(), truths.len());
            Ok((mode, out))
        })
        .collect()
}

fn sequence_row(
    corpus: &'static str,
    sequence: usize,
    mode: SequenceMode,
    out: &[InpaintResult],
    truths: &[Image],
) -> Result<SequenceRow> {
    let images: Vec<Image> = out.iter().map(|r| r.image.clone()).collect();
    let psnrs = out
        .iter()
        .zip(truths)
        .map(|(r, t)| psnr(&r.image, t))
        .collect::<Result<Vec<_>>>()?;
    let (eta, flick) = if images.len() >= 2 {
        (temporal_consistency_eta(&images)?, flicker(&images)?)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(SequenceRow {
        corpus,
        sequence,
        mode,
        eta,
        flicker: flick,
        mean_psnr: psnrs.iter().sum::<f64>() / psnrs.len() as f64,
    })
}

type VideoCase = (Vec<FrameRow>, Vec<SequenceRow>);

fn video_case(
    m: &Models<'_>,
    config: &BenchConfig,
    mask: &Mask,
    sequence: usize,
) -> Result<VideoCase> {
    let seed = case_seed(config.seed, Corpus::Video, sequence);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = sample_latent(&mut rng, m.generator.latent_dim()).into_vec();
    let mut truths = Vec::with_capacity(config.video_frames);
    for _ in 0..config.video_frames {
        truths.push(m.generator.forward(&Latent::new(z.clone())?)?);
        for v in z.iter_mut() {
            *v = (*v + rng.gen_range(-config.video_drift..=config.video_drift)).clamp(-1.0, 1.0);
        }
    }
    let frames: Vec<(Image, Mask)> = truths.iter().map(|t| (t.clone(), mask.clone())).collect();
    let mut frame_rows = Vec::new();
    let mut seq_rows = Vec::new();
    let optim_seed = rng.gen();
    for (mode, out) in run_modes(m, config, &frames, &truths, optim_seed)? {
        for (t, (r, truth)) in out.iter().zip(&truths).enumerate() {
            frame_rows.push(FrameRow {
                sequence,
                mode,
                frame: t,
                pivot: t % config.window == 0,
                iters: r.iterations_to_saturation(),
                psnr: psnr(&r.image, truth)?,
            });
        }
        seq_rows.push(sequence_row("video", sequence, mode, &out, &truths)?);
    }
    Ok((frame_rows, seq_rows))
}

fn pseudo_case(m: &Models<'_>, config: &BenchConfig, sequence: usize) -> Result<Vec<SequenceRow>> {
    let seed = case_seed(config.seed, Corpus::Pseudo, sequence);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = m
        .generator
        .forward(&sample_latent(&mut rng, m.generator.latent_dim()))?;
    let seq = make_pseudo_sequence(&base, config.pseudo_length, &config.pseudo_masks, rng.gen())?;
    let frames = seq.frames();
    let truths = vec![base; frames.len()];
    run_modes(m, config, &frames, &truths, rng.gen())?
        .into_iter()
        .map(|(mode, out)| sequence_row("pseudo", sequence, mode, &out, &truths))
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn mode_summaries(frames: &[FrameRow], sequences: &[SequenceRow]) -> Vec<ModeSummary> {
    SequenceMode::ALL
        .iter()
        .map(|&mode| {
            let iters: Vec<f64> = frames
                .iter()
                .filter(|r| r.mode == mode && (mode == SequenceMode::Independent || !r.pivot))
                .map(|r| r.iters as f64)
                .collect();
            let rows = || sequences.iter().filter(move |r| r.mode == mode);
            ModeSummary {
                mode,
                iters: quartiles(&iters),
                mean_eta: mean(rows().map(|r| r.eta)),
                mean_flicker: mean(rows().map(|r| r.flicker)),
                mean_psnr: mean(rows().map(|r| r.mean_psnr)),
            }
        })
        .collect()
}

fn partition<T>(corpus: &str, results: Vec<Result<T>>, errors: &mut Vec<CaseError>) -> Vec<T> {
    let mut ok = Vec::new();
    for (case, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => errors.push(CaseError {
                corpus: corpus.into(),
                case,
                error: e.to_string(),
            }),
        }
    }
    ok
}

/// Runs all corpora. Cases are spread over `exec`; the report is assembled
/// in case order.
pub fn run_benchmark(
    generator: &dyn Generator,
    discriminator: &dyn Discriminator,
    pool: &Pool,
    config: &BenchConfig,
    exec: Exec,
) -> Result<BenchReport> {
    config.validate()?;
    if pool.fingerprint() != generator.fingerprint() {
        return Err(Error::Integrity(
            "pool was built by a different generator".into(),
        ));
    }
    let shape = generator.output_shape();
    let mask = Mask::center_hole(shape.height, shape.width, config.hole_fraction)?;
    let models = Models {
        generator,
        discriminator,
        pool,
    };
    let mut errors = Vec::new();

    let single = partition(
        "single",
        exec.map_range(config.single_cases, |i| {
            single_case(&models, config, &mask, i)
        }),
        &mut errors,
    );
    let video = partition(
        "video",
        exec.map_range(config.video_sequences, |i| {
            video_case(&models, config, &mask, i)
        }),
        &mut errors,
    );
    let pseudo = partition(
        "pseudo",
        exec.map_range(config.pseudo_sequences, |i| pseudo_case(&models, config, i)),
        &mut errors,
    );

    let video_frames: Vec<FrameRow> = video.iter().flat_map(|v| v.0.clone()).collect();
    let video_sequences: Vec<SequenceRow> = video.iter().flat_map(|v| v.1.clone()).collect();
    let pseudo_sequences: Vec<SequenceRow> = pseudo.into_iter().flatten().collect();

    let col = |f: fn(&SingleCase) -> f64| quartiles(&single.iter().map(f).collect::<Vec<_>>());
    let single_summary = SingleSummary {
        cases: config.single_cases,
        failed: config.single_cases - single.len(),
        speedup: col(|c| c.speedup),
        random_iters: col(|c| c.random_iters as f64),
        pool_iters: col(|c| c.pool_iters as f64),
        random_psnr: col(|c| c.random_psnr),
        pool_psnr: col(|c| c.pool_psnr),
    };

    let video_modes = mode_summaries(&video_frames, &video_sequences);
    let median_of = |mode: SequenceMode| {
        video_modes
            .iter()
            .find(|s| s.mode == mode)
            .and_then(|s| s.iters)
            .map(|q| q.median)
    };
    let reuse_to_independent = match (
        median_of(SequenceMode::Reuse),
        median_of(SequenceMode::Independent),
    ) {
        (Some(r), Some(i)) if i > 0.0 => Some(r / i),
        _ => None,
    };

    let eta_of = |mode: SequenceMode| -> Vec<f64> {
        pseudo_sequences
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.eta)
            .collect()
    };
    let pseudo_summary = PseudoSummary {
        sequences: config.pseudo_sequences,
        failed: config.pseudo_sequences - pseudo_sequences.len() / SequenceMode::ALL.len(),
        modes: mode_summaries(&[], &pseudo_sequences),
        group_vs_independent: paired_lower_bound(
            &eta_of(SequenceMode::ReuseGroup),
            &eta_of(SequenceMode::Independent),
        ),
    };

    let summary = Summary {
        config: config.clone(),
        models: ModelInfo {
            generator: generator.fingerprint().to_string(),
            discriminator_input: discriminator.input_shape().to_string(),
            pool_size: pool.len(),
            pool_fingerprint: pool.fingerprint().to_string(),
        },
        single: single_summary,
        video: VideoSummary {
            sequences: config.video_sequences,
            failed: config.video_sequences - video.len(),
            modes: video_modes,
            reuse_to_independent,
        },
        pseudo: pseudo_summary,
        errors,
    };
    Ok(BenchReport {
        single,
        video_frames,
        video_sequences,
        pseudo_sequences,
        summary,
    })
}
