use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use latent_inpaint::bench::{run_benchmark, BenchConfig};
use latent_inpaint::generators::{load_discriminator, load_generator, Discriminator, Generator};
use latent_inpaint::io::{
    load_frames, load_image, load_mask, load_sequence, read_json, save_image, save_sequence,
    write_json, RunConfig,
};
use latent_inpaint::metrics::{flicker, ms_ssim, psnr, temporal_consistency_eta};
use latent_inpaint::pipeline::{
    inpaint_image, inpaint_sequence, InitInfo, InitStrategy, InpaintConfig, InpaintResult,
    SequenceMode,
};
use latent_inpaint::pool::{build_pool, Pool, DEFAULT_POOL_SIZE};
use latent_inpaint::trainer::{evaluate, train, TrainConfig};
use latent_inpaint::Exec;
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "linpaint",
    version,
    about = "Latent-space inpainting for images and frame sequences"
)]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a small MLP generator/discriminator pair on synthetic blobs.
    TrainToyGan {
        /// Output directory for generator.json/.lgw and discriminator.json/.lgw.
        #[arg(long)]
        out: PathBuf,
        /// JSON training config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a latent pool for a generator.
    BuildPool {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long, default_value_t = DEFAULT_POOL_SIZE)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inpaint one image.
    Inpaint(RunArgs),
    /// Inpaint a directory of frame_%04d.png / mask_%04d.png files.
    InpaintSeq(RunArgs),
    /// Run the seeded benchmark corpora and write CSV/JSON reports.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Generator descriptor; the built-in blob model is used if absent.
        #[arg(long, requires_all = ["discriminator", "pool"])]
        generator: Option<PathBuf>,
        #[arg(long)]
        discriminator: Option<PathBuf>,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two images, or measure consistency of a frame directory.
    Metrics {
        #[arg(long, requires = "b", conflicts_with = "frames")]
        a: Option<PathBuf>,
        #[arg(long)]
        b: Option<PathBuf>,
        #[arg(long)]
        frames: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long)]
    discriminator: Option<PathBuf>,
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Input image, or frame directory.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Output image, or output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// independent, reuse or reuse+group.
    #[arg(long)]
    mode: Option<SequenceMode>,
    /// random or pool.
    #[arg(long, value_parser = parse_init)]
    init: Option<InitStrategy>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON run report.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_init(s: &str) -> Result<InitStrategy, String> {
    match s {
        "random" => Ok(InitStrategy::Random),
        "pool" => Ok(InitStrategy::Pool),
        other => Err(format!("unknown init strategy {other:?}")),
    }
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => {
                let need = |v: Option<PathBuf>, flag: &str| {
                    v.with_context(|| format!("--{flag} is required without --config"))
                };
                RunConfig {
                    generator: need(self.generator.clone(), "generator")?,
                    discriminator: need(self.discriminator.clone(), "discriminator")?,
                    pool: None,
                    input: need(self.input.clone(), "input")?,
                    mask: None,
                    output: need(self.output.clone(), "output")?,
                    inpaint: InpaintConfig::default(),
                    mode: SequenceMode::Reuse,
                    seed: None,
                    report: None,
                }
            }
        };
        if let Some(v) = self.generator {
            config.generator = v;
        }
        if let Some(v) = self.discriminator {
            config.discriminator = v;
        }
        if let Some(v) = self.input {
            config.input = v;
        }
        if let Some(v) = self.output {
            config.output = v;
        }
        if self.pool.is_some() {
            config.pool = self.pool;
        }
        if self.mask.is_some() {
            config.mask = self.mask;
        }
        if self.report.is_some() {
            config.report = self.report;
        }
        if self.seed.is_some() {
            config.seed = self.seed;
        }
        if let Some(v) = self.mode {
            config.mode = v;
        }
        let c = &mut config.inpaint;
        if let Some(v) = self.init {
            c.init = v;
        }
        if let Some(v) = self.iters {
            c.optim.max_iters = v;
        }
        if let Some(v) = self.window {
            c.window = v;
        }
        if let Some(v) = self.lambda {
            c.weights.lambda = v;
        }
        if let Some(v) = self.gamma {
            c.weights.gamma = v;
        }
        if let Some(v) = self.mu {
            c.weights.mu = v;
        }
        Ok(config)
    }
}

#[derive(Serialize)]
struct FrameReport {
    frame: usize,
    init: InitInfo,
    iterations: usize,
    iterations_to_saturation: usize,
    initial_objective: f64,
    final_objective: f64,
    refinement_iterations: Option<usize>,
}

impl FrameReport {
    fn new(frame: usize, r: &InpaintResult) -> Self {
        FrameReport {
            frame,
            init: r.init.clone(),
            iterations: r.trajectory.iterations(),
            iterations_to_saturation: r.iterations_to_saturation(),
            initial_objective: r.trajectory.values[0],
            final_objective: *r.trajectory.values.last().expect("non-empty trajectory"),
            refinement_iterations: r.refinement.as_ref().map(|t| t.iterations()),
        }
    }
}

#[derive(Serialize)]
struct RunReport<'a> {
    config: &'a RunConfig,
    effective: &'a InpaintConfig,
    generator_fingerprint: String,
    frames: Vec<FrameReport>,
}

struct LoadedModels {
    generator: Box<dyn Generator>,
    discriminator: Box<dyn Discriminator>,
    pool: Option<Pool>,
}

fn load_models(config: &RunConfig) -> Result<LoadedModels> {
    let generator = load_generator(&config.generator)?;
    let discriminator = load_discriminator(&config.discriminator)?;
    let pool = match &config.pool {
        Some(p) => Some(Pool::load(p, generator.as_ref())?),
        None => None,
    };
    Ok(LoadedModels {
        generator,
        discriminator,
        pool,
    })
}

fn write_report(
    config: &RunConfig,
    effective: &InpaintConfig,
    models: &LoadedModels,
    results: &[InpaintResult],
) -> Result<()> {
    let Some(path) = &config.report else {
        return Ok(());
    };
    let report = RunReport {
        config,
        effective,
        generator_fingerprint: models.generator.fingerprint().to_string(),
        frames: results
            .iter()
            .enumerate()
            .map(|(t, r)| FrameReport::new(t, r))
            .collect(),
    };
    write_json(path, &report)?;
    Ok(())
}

fn cmd_inpaint(args: RunArgs, exec: Exec) -> Result<()> {
    let config = args.resolve()?;
    config.validate(false)?;
    let effective = config.effective_inpaint();
    let models = load_models(&config)?;
    let image = load_image(&config.input)?;
    let mask = load_mask(config.mask.as_deref().expect("validated"))?;
    let result = inpaint_image(
        &image,
        &mask,
        models.generator.as_ref(),
        models.discriminator.as_ref(),
        models.pool.as_ref(),
        &effective,
        exec,
    )?;
    save_image(&result.image, &config.output)?;
    write_report(&config, &effective, &models, std::slice::from_ref(&result))?;
    println!(
        "{}: {} iterations, objective {:.6} -> {:.6}",
        config.output.display(),
        result.trajectory.iterations(),
        result.trajectory.values[0],
        result.trajectory.final_value().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_inpaint_seq(args: RunArgs, exec: Exec) -> Result<()> {
    let config = args.resolve()?;
    config.validate(true)?;
    let effective = config.effective_inpaint();
    let models = load_models(&config)?;
    let frames = load_sequence(&config.input)?;
    let results = inpaint_sequence(
        &frames,
        models.generator.as_ref(),
        models.discriminator.as_ref(),
        models.pool.as_ref(),
        &effective,
        config.mode,
        exec,
    )?;
    let images: Vec<_> = results.iter().map(|r| r.image.clone()).collect();
    save_sequence(&config.output, &images, None)?;
    write_report(&config, &effective, &models, &results)?;
    println!(
        "{}: {} frames inpainted ({})",
        config.output.display(),
        results.len(),
        config.mode
    );
    Ok(())
}

fn cmd_train(
    out: &Path,
    config: Option<PathBuf>,
    steps: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut config: TrainConfig = match config {
        Some(p) => read_json(&p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = steps {
        config.steps = s;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    let outcome = train(&config)?;
    outcome.save(out)?;
    write_json(&out.join("train_config.json"), &config)?;
    write_json(&out.join("history.json"), &outcome.history)?;
    let eval = evaluate(
        &outcome.generator,
        &outcome.discriminator,
        &config.dataset,
        256,
        config.seed ^ 0x5eed,
    )?;
    println!(
        "trained {} steps: held-out D accuracy {:.3}, g_loss {:.4}",
        config.steps, eval.d_accuracy, eval.g_loss
    );
    Ok(())
}

fn cmd_bench(
    config: Option<PathBuf>,
    generator: Option<PathBuf>,
    discriminator: Option<PathBuf>,
    pool: Option<PathBuf>,
    seed: Option<u64>,
    out: &Path,
    exec: Exec,
) -> Result<()> {
    let mut config: BenchConfig = match config {
        Some(p) => read_json(&p)?,
        None => BenchConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    let report = match (generator, discriminator, pool) {
        (Some(g), Some(d), Some(p)) => {
            let g = load_generator(&g)?;
            let d = load_discriminator(&d)?;
            let pool = Pool::load(&p, g.as_ref())?;
            run_benchmark(g.as_ref(), d.as_ref(), &pool, &config, exec)?
        }
        (None, None, None) => {
            let (g, d, pool) = config.builtin.build(exec)?;
            run_benchmark(&g, &d, &pool, &config, exec)?
        }
        _ => bail!("--generator, --discriminator and --pool must be given together"),
    };
    report.write(out)?;
    let s = &report.summary;
    if let Some(q) = s.single.speedup {
        println!(
            "single-image speedup median {:.3} (q1 {:.3}, q3 {:.3})",
            q.median, q.q1, q.q3
        );
    }
    if let Some(r) = s.video.reuse_to_independent {
        println!("video reuse/independent iteration ratio {r:.3}");
    }
    for m in &s.pseudo.modes {
        if let Some(eta) = m.mean_eta {
            println!("pseudo-sequence eta {:<12} {eta:.3}", m.mode.as_str());
        }
    }
    if !s.errors.is_empty() {
        eprintln!("{} case(s) failed; see summary.json", s.errors.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct PairMetrics {
    psnr: f64,
    ms_ssim: f64,
}

#[derive(Serialize)]
struct SequenceMetrics {
    frames: usize,
    eta: f64,
    flicker: f64,
}

fn cmd_metrics(a: Option<PathBuf>, b: Option<PathBuf>, frames: Option<PathBuf>) -> Result<()> {
    let text = match (a, b, frames) {
        (Some(a), Some(b), None) => {
            let (a, b) = (load_image(&a)?, load_image(&b)?);
            serde_json::to_string_pretty(&PairMetrics {
                psnr: psnr(&a, &b)?,
                ms_ssim: ms_ssim(&a, &b)?,
            })?
        }
        (None, None, Some(dir)) => {
            let images = load_frames(&dir)?;
            serde_json::to_string_pretty(&SequenceMetrics {
                frames: images.len(),
                eta: temporal_consistency_eta(&images)?,
                flicker: flicker(&images)?,
            })?
        }
        _ => bail!("give either --a and --b, or --frames"),
    };
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    match cli.command {
        Command::TrainToyGan {
            out,
            config,
            steps,
            seed,
        } => cmd_train(&out, config, steps, seed),
        Command::BuildPool {
            generator,
            size,
            seed,
            out,
        } => {
            let g = load_generator(&generator)?;
            let pool = build_pool(g.as_ref(), size, seed, exec)?;
            pool.save(&out)?;
            println!(
                "{}: {} entries, generator {}",
                out.display(),
                pool.len(),
                pool.fingerprint()
            );
            Ok(())
        }
        Command::Inpaint(args) => cmd_inpaint(args, exec),
        Command::InpaintSeq(args) => cmd_inpaint_seq(args, exec),
        Command::Bench {
            config,
            generator,
            discriminator,
            pool,
            seed,
            out,
        } => cmd_bench(config, generator, discriminator, pool, seed, &out, exec),
        Command::Metrics { a, b, frames } => cmd_metrics(a, b, frames),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
