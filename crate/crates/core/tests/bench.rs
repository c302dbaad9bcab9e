use latent_inpaint::bench::{run_benchmark, BenchConfig};
use latent_inpaint::generators::{sample_latent, Generator};
use latent_inpaint::{Exec, OptimConfig, Pool};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> BenchConfig {
    BenchConfig {
        optim: OptimConfig::default().with_iters(150),
        single_cases: 6,
        video_sequences: 2,
        video_frames: 6,
        pseudo_sequences: 2,
        pseudo_length: 3,
        ..BenchConfig::default()
    }
}

#[test]
fn planted_pool_needs_no_more_iterations_than_random_init() {
    let config = BenchConfig {
        single_cases: 1,
        video_sequences: 0,
        pseudo_sequences: 0,
        ..small()
    };
    let (g, d, pool) = config.builtin.build(Exec::default()).unwrap();
    let probe = run_benchmark(&g, &d, &pool, &config, Exec::default()).unwrap();
    let seed = probe.single[0].seed;

    // The case's ground-truth latent is the first draw from its seed.
    let truth = sample_latent(&mut ChaCha8Rng::seed_from_u64(seed), g.latent_dim());
    let planted = Pool::from_latents(&g, vec![truth], Exec::default()).unwrap();
    let report = run_benchmark(&g, &d, &planted, &config, Exec::default()).unwrap();
    let case = &report.single[0];
    assert_eq!(case.seed, seed);
    assert!(case.pool_iters <= case.random_iters, "{case:?}");
    assert!(case.nn_loss < 1e-3, "{case:?}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[test]
fn summary_medians_follow_from_the_csv() {
    let config = small();
    let (g, d, pool) = config.builtin.build(Exec::default()).unwrap();
    let report = run_benchmark(&g, &d, &pool, &config, Exec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    report.write(dir.path()).unwrap();

    let mut reader = csv::Reader::from_path(dir.path().join("single.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (ri, pi, si) = (col("random_iters"), col("pool_iters"), col("speedup"));
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), config.single_cases);
    let field = |i: usize| -> Vec<f64> { rows.iter().map(|r| r[i].parse().unwrap()).collect() };

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    let single = &summary["single"];
    for (key, i) in [("speedup", si), ("random_iters", ri), ("pool_iters", pi)] {
        let reported = single[key]["median"].as_f64().unwrap();
        assert!((reported - median(field(i))).abs() < 1e-9, "{key}");
    }
    // Reports carry the full configuration.
    let echoed: BenchConfig = serde_json::from_value(summary["config"].clone()).unwrap();
    assert_eq!(echoed, config);
}

#[test]
fn identical_seed_identical_bytes() {
    let config = small();
    let (g, d, pool) = config.builtin.build(Exec::default()).unwrap();
    let a = run_benchmark(&g, &d, &pool, &config, Exec::Parallel).unwrap();
    let b = run_benchmark(&g, &d, &pool, &config, Exec::Sequential).unwrap();
    assert_eq!(a.single_csv().unwrap(), b.single_csv().unwrap());
    assert_eq!(a.frames_csv().unwrap(), b.frames_csv().unwrap());
    assert_eq!(a.sequences_csv().unwrap(), b.sequences_csv().unwrap());
    assert_eq!(a.summary_json().unwrap(), b.summary_json().unwrap());

    let other = BenchConfig { seed: 1, ..config };
    let c = run_benchmark(&g, &d, &pool, &other, Exec::default()).unwrap();
    assert_ne!(a.single_csv().unwrap(), c.single_csv().unwrap());
}

#[test]
fn pool_from_another_generator_is_rejected() {
    let config = small();
    let (g, d, _) = config.builtin.build(Exec::default()).unwrap();
    let mut other = config.builtin.clone();
    other.generator.amplitude = 1.2;
    let (_, _, foreign) = other.build(Exec::default()).unwrap();
    assert!(run_benchmark(&g, &d, &foreign, &config, Exec::default()).is_err());
}
