use std::fs;

use latent_inpaint::generators::{
    load_discriminator, load_generator, sample_latent, BlobGenerator, BlobGeneratorSpec,
    Discriminator, Generator,
};
use latent_inpaint::pool::build_pool;
use latent_inpaint::trainer::{train, TrainConfig};
use latent_inpaint::{Exec, Image, Latent, Pool};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vjp_matches_finite_differences(g: &dyn Generator, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.output_shape();
    let h = 1e-4;
    for point in 0..20 {
        let z = sample_latent(&mut rng, g.latent_dim());
        let cot = Image::from_vec(
            shape,
            (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let inner = |v: Vec<f64>| -> f64 {
            let out = g.forward(&Latent::new(v).unwrap()).unwrap();
            out.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum()
        };
        let analytic = g.vjp(&z, &cot).unwrap();
        for i in 0..g.latent_dim() {
            let mut up = z.as_slice().to_vec();
            let mut down = up.clone();
            up[i] += h;
            down[i] -= h;
            let numeric = (inner(up) - inner(down)) / (2.0 * h);
            let a = analytic.as_slice()[i];
            let err = (a - numeric).abs() / numeric.abs().max(a.abs()).max(1e-6);
            assert!(err <= 1e-4, "point {point} component {i}: {a} vs {numeric}");
        }
    }
}

fn short_training(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 20,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn builtin_generators_pass_gradient_checks() {
    vjp_matches_finite_differences(
        &BlobGenerator::new(BlobGeneratorSpec::default()).unwrap(),
        1,
    );
    let rgb = BlobGeneratorSpec {
        channels: 3,
        ..BlobGeneratorSpec::default()
    };
    vjp_matches_finite_differences(&BlobGenerator::new(rgb).unwrap(), 2);
    vjp_matches_finite_differences(&train(&short_training(3)).unwrap().generator, 3);
}

#[test]
fn trained_models_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = train(&short_training(4)).unwrap();
    outcome.save(dir.path()).unwrap();
    let g = load_generator(&dir.path().join("generator.json")).unwrap();
    let d = load_discriminator(&dir.path().join("discriminator.json")).unwrap();
    assert_eq!(g.fingerprint(), outcome.generator.fingerprint());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let z = sample_latent(&mut rng, g.latent_dim());
        let a = g.forward(&z).unwrap();
        assert_eq!(a, outcome.generator.forward(&z).unwrap());
        assert_eq!(
            d.forward(&a).unwrap().to_bits(),
            outcome.discriminator.forward(&a).unwrap().to_bits()
        );
    }
}

#[test]
fn same_seed_writes_identical_weight_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(&short_training(6)).unwrap().save(a.path()).unwrap();
    train(&short_training(6)).unwrap().save(b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 4);
    for name in names {
        assert_eq!(
            fs::read(a.path().join(&name)).unwrap(),
            fs::read(b.path().join(&name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn pool_files_are_bound_to_their_generator() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pool.lpool");
    let g = BlobGenerator::new(BlobGeneratorSpec::default()).unwrap();
    let pool = build_pool(&g, 25, 8, Exec::default()).unwrap();
    pool.save(&path).unwrap();
    let loaded = Pool::load(&path, &g).unwrap();
    assert_eq!(loaded.to_bytes(), pool.to_bytes());
    for e in loaded.entries() {
        assert_eq!(e.image, g.forward(&e.latent).unwrap().round_to_f32());
    }

    let other = BlobGenerator::new(BlobGeneratorSpec {
        amplitude: 1.4,
        ..BlobGeneratorSpec::default()
    })
    .unwrap();
    assert!(Pool::load(&path, &other).is_err());
}
