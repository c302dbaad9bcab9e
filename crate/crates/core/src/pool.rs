//! Offline pool of generated samples and nearest-neighbor initialization.
//!
//! `.lpool` layout (integers `u32`, floats `f32`, little-endian):
//!
//! ```text
//! magic        6 bytes  "LPOOL1"
//! n, d, h, w, c         u32 each
//! fingerprint  32 bytes generator SHA-256
//! entries      n × (d latent floats, h*w*c image floats)
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::generators::{sample_latent, Fingerprint, Generator};
use crate::losses::nn_matching_loss;
use crate::metrics::ms_ssim;
use crate::tensor::{grad_x, grad_y, mask_apply, Image, Latent, Mask, Shape};

pub const POOL_MAGIC: &[u8; 6] = b"LPOOL1";
pub const DEFAULT_POOL_SIZE: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub latent: Latent,
    pub image: Image,
}

/// `N` stored `(z_i, G(z_i))` pairs. Latents and images are held at `f32`
/// precision so that a pool and its serialized form are interchangeable.
#[derive(Clone, Debug, PartialEq)]
pub struct Pool {
    entries: Vec<PoolEntry>,
    fingerprint: Fingerprint,
    shape: Shape,
    latent_dim: usize,
}

/// Result of the nearest-neighbor scan.
#[derive(Clone, Debug, PartialEq)]
pub struct NnMatch {
    pub latent: Latent,
    pub index: usize,
    pub loss: f64,
}

impl Pool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// The first `n` entries, which form the pool built with the same seed
    /// and size `n`.
    pub fn prefix(&self, n: usize) -> Result<Pool> {
        if n == 0 || n > self.len() {
            return Err(Error::Config(format!(
                "prefix of {n} entries from a pool of {}",
                self.len()
            )));
        }
        Ok(Pool {
            entries: self.entries[..n].to_vec(),
            ..self.clone()
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let per = self.latent_dim + self.shape.len();
        let mut out = Vec::with_capacity(6 + 20 + 32 + 4 * per * self.len());
        out.extend_from_slice(POOL_MAGIC);
        for v in [
            self.len(),
            self.latent_dim,
            self.shape.height,
            self.shape.width,
            self.shape.channels,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.fingerprint.0);
        for e in &self.entries {
            for v in e.latent.as_slice().iter().chain(e.image.data()) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parses a pool and verifies it against `generator`: the fingerprint
    /// must match, and the first, middle and last entries are regenerated.
    pub fn from_bytes(bytes: &[u8], generator: &dyn Generator) -> Result<Pool> {
        if bytes.len() < 6 + 20 + 32 || &bytes[..6] != POOL_MAGIC {
            return Err(Error::Format("missing LPOOL1 header".into()));
        }
        let field = |i: usize| {
            let at = 6 + 4 * i;
            u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
        };
        let (n, d) = (field(0), field(1));
        let shape = Shape::new(field(2), field(3), field(4));
        let mut fp = [0u8; 32];
        fp.copy_from_slice(&bytes[26..58]);
        let fingerprint = Fingerprint(fp);
        if fingerprint != generator.fingerprint() {
            return Err(Error::Integrity(format!(
                "pool was built by generator {fingerprint}, not {}",
                generator.fingerprint()
            )));
        }
        if d != generator.latent_dim() || shape != generator.output_shape() {
            return Err(Error::Integrity(format!(
                "pool geometry d={d}, {shape} does not match generator"
            )));
        }
        if n == 0 {
            return Err(Error::Format("pool is empty".into()));
        }
        let per = d + shape.len();
        let expected = 58 + 4 * per * n;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "pool body has {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let floats: Vec<f64> = bytes[58..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let entries = floats
            .chunks_exact(per)
            .map(|chunk| {
                Ok(PoolEntry {
                    latent: Latent::new(chunk[..d].to_vec())?,
                    image: Image::from_unit_range(shape, chunk[d..].to_vec())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pool = Pool {
            entries,
            fingerprint,
            shape,
            latent_dim: d,
        };
        for i in [0, n / 2, n - 1] {
            let e = &pool.entries[i];
            if generator.forward(&e.latent)?.round_to_f32() != e.image {
                return Err(Error::Integrity(format!(
                    "pool entry {i} does not match its regenerated image"
                )));
            }
        }
        Ok(pool)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, generator: &dyn Generator) -> Result<Pool> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, generator).map_err(|e| e.context(path.display().to_string()))
    }
}

/// Draws `n` latents from a seeded stream and renders them. Latents are
/// drawn sequentially, so a pool of size `n` is a prefix of every larger pool
/// with the same seed.
pub fn build_pool(generator: &dyn Generator, n: usize, seed: u64, exec: Exec) -> Result<Pool> {
    if n == 0 {
        return Err(Error::Config("pool size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latents: Vec<Latent> = (0..n)
        .map(|_| sample_latent(&mut rng, generator.latent_dim()))
        .collect();
    Pool::from_latents(generator, latents, exec)
}

impl Pool {
    /// Pool over caller-chosen latents, rounded to `f32` before rendering.
    pub fn from_latents(
        generator: &dyn Generator,
        latents: Vec<Latent>,
        exec: Exec,
    ) -> Result<Pool> {
        if latents.is_empty() {
            return Err(Error::Config("pool size must be at least 1".into()));
        }
        if let Some(z) = latents.iter().find(|z| z.dim() != generator.latent_dim()) {
            return Err(Error::shape(format!(
                "pool latent has {} dims, generator takes {}",
                z.dim(),
                generator.latent_dim()
            )));
        }
        let latents: Vec<Latent> = latents.iter().map(Latent::round_to_f32).collect();
        let entries = exec
            .map(&latents, |z| {
                Ok(PoolEntry {
                    latent: z.clone(),
                    image: generator.forward(z)?.round_to_f32(),
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Pool {
            entries,
            fingerprint: generator.fingerprint(),
            shape: generator.output_shape(),
            latent_dim: generator.latent_dim(),
        })
    }
}

/// `L_nn` against one damaged image, with the damaged image's gradients
/// computed once for the whole scan.
struct NnQuery<'a> {
    damaged: &'a Image,
    mask: &'a Mask,
    damaged_gx: Image,
    damaged_gy: Image,
    gamma: f64,
}

impl<'a> NnQuery<'a> {
    fn new(damaged: &'a Image, mask: &'a Mask, gamma: f64) -> Result<Self> {
        Ok(NnQuery {
            damaged,
            mask,
            damaged_gx: grad_x(damaged)?,
            damaged_gy: grad_y(damaged)?,
            gamma,
        })
    }

    fn loss(&self, candidate: &Image) -> Result<f64> {
        let masked = mask_apply(candidate, self.mask)?;
        let data = crate::tensor::l1_sum(self.damaged, &masked, None)?;
        if self.gamma == 0.0 {
            return Ok(data);
        }
        let structure = crate::tensor::l1_sum(&self.damaged_gx, &grad_x(&masked)?, None)?
            + crate::tensor::l1_sum(&self.damaged_gy, &grad_y(&masked)?, None)?;
        Ok(data + self.gamma * structure)
    }
}

/// Exhaustive argmin of `L_nn(I_d, M, p_i)` over the pool; ties go to the
/// lowest index.
pub fn nn_init(
    damaged: &Image,
    mask: &Mask,
    pool: &Pool,
    gamma: f64,
    exec: Exec,
) -> Result<NnMatch> {
    if pool.is_empty() {
        return Err(Error::Config("cannot initialize from an empty pool".into()));
    }
    if damaged.shape() != pool.shape {
        return Err(Error::shape(format!(
            "damaged image {} does not match pool images {}",
            damaged.shape(),
            pool.shape
        )));
    }
    mask.check_image(damaged)?;
    let query = NnQuery::new(damaged, mask, gamma)?;
    let losses = exec
        .map(&pool.entries, |e| query.loss(&e.image))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (index, loss) =
        losses
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |best, (i, l)| if l < best.1 { (i, l) } else { best },
            );
    Ok(NnMatch {
        latent: pool.entries[index].latent.clone(),
        index,
        loss,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolQualityPoint {
    pub n: usize,
    pub index: usize,
    pub nn_loss: f64,
    /// MS-SSIM between the masked best match and the damaged image.
    pub ms_ssim: f64,
}

/// Best-match quality as the pool grows through nested prefixes.
pub fn pool_quality_curve(
    generator: &dyn Generator,
    damaged: &Image,
    mask: &Mask,
    sizes: &[usize],
    gamma: f64,
    seed: u64,
    exec: Exec,
) -> Result<Vec<PoolQualityPoint>> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] > w[1]) || sizes[0] == 0 {
        return Err(Error::Config(
            "pool sizes must be positive and ascending".into(),
        ));
    }
    let full = build_pool(generator, *sizes.last().expect("non-empty"), seed, exec)?;
    curve_from_pool(&full, damaged, mask, sizes, gamma, exec)
}

/// The curve computed from an existing pool's prefixes.
pub fn curve_from_pool(
    pool: &Pool,
    damaged: &Image,
    mask: &Mask,
    sizes: &[usize],
    gamma: f64,
    exec: Exec,
) -> Result<Vec<PoolQualityPoint>> {
    sizes
        .iter()
        .map(|&n| {
            let m = nn_init(damaged, mask, &pool.prefix(n)?, gamma, exec)?;
            let best = mask_apply(&pool.entries[m.index].image, mask)?;
            Ok(PoolQualityPoint {
                n,
                index: m.index,
                nn_loss: m.loss,
                ms_ssim: ms_ssim(&best, damaged)?,
            })
        })
        .collect()
}

/// Direct evaluation of `L_nn` for every entry, used by reports.
pub fn pool_losses(damaged: &Image, mask: &Mask, pool: &Pool, gamma: f64) -> Result<Vec<f64>> {
    pool.entries
        .iter()
        .map(|e| nn_matching_loss(damaged, mask, &e.image, gamma))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{BlobGenerator, BlobGeneratorSpec};

    fn gen() -> BlobGenerator {
        BlobGenerator::new(BlobGeneratorSpec {
            blobs: 2,
            height: 12,
            width: 12,
            channels: 1,
            sigma_min: 1.5,
            sigma_max: 4.0,
            amplitude: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn single_entry_pool_is_consistent() {
        let g = gen();
        let pool = build_pool(&g, 1, 3, Exec::default()).unwrap();
        assert_eq!(pool.len(), 1);
        let e = &pool.entries()[0];
        assert_eq!(g.forward(&e.latent).unwrap().round_to_f32(), e.image);
    }

    #[test]
    fn same_seed_same_bytes_and_round_trip() {
        let g = gen();
        let a = build_pool(&g, 20, 7, Exec::Parallel).unwrap();
        let b = build_pool(&g, 20, 7, Exec::Sequential).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let back = Pool::from_bytes(&a.to_bytes(), &g).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn fingerprint_mismatch_rejected() {
        let g = gen();
        let pool = build_pool(&g, 5, 1, Exec::default()).unwrap();
        let mut spec = g.spec().clone();
        spec.amplitude = 1.1;
        let other = BlobGenerator::new(spec).unwrap();
        assert!(matches!(
            Pool::from_bytes(&pool.to_bytes(), &other),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn tampered_entry_rejected() {
        let g = gen();
        let pool = build_pool(&g, 5, 1, Exec::default()).unwrap();
        let mut bytes = pool.to_bytes();
        // overwrite the first image value of entry 0
        let at = 58 + 4 * g.latent_dim();
        bytes[at..at + 4].copy_from_slice(&0.5f32.to_le_bytes());
        assert!(Pool::from_bytes(&bytes, &g).is_err());
    }

    #[test]
    fn exact_match_and_tie_rule() {
        let g = gen();
        let mut pool = build_pool(&g, 10, 2, Exec::default()).unwrap();
        let target = pool.entries[6].image.clone();
        let mask = Mask::center_hole(12, 12, 0.25).unwrap();
        let damaged = mask_apply(&target, &mask).unwrap();
        let m = nn_init(&damaged, &mask, &pool, 0.01, Exec::default()).unwrap();
        assert_eq!(m.index, 6);
        assert_eq!(m.loss, 0.0);

        pool.entries[3] = pool.entries[7].clone();
        let damaged = mask_apply(&pool.entries[7].image, &mask).unwrap();
        let m = nn_init(&damaged, &mask, &pool, 0.01, Exec::default()).unwrap();
        assert_eq!(m.index, 3);
    }

    #[test]
    fn curve_is_monotone_in_nn_loss() {
        let g = gen();
        let truth = build_pool(&g, 1, 999, Exec::default()).unwrap();
        let mask = Mask::center_hole(12, 12, 0.25).unwrap();
        let damaged = mask_apply(&truth.entries[0].image, &mask).unwrap();
        let curve = pool_quality_curve(
            &g,
            &damaged,
            &mask,
            &[1, 5, 20, 80],
            0.01,
            4,
            Exec::default(),
        )
        .unwrap();
        for w in curve.windows(2) {
            assert!(w[1].nn_loss <= w[0].nn_loss);
        }
        let again =
            pool_quality_curve(&g, &damaged, &mask, &[1], 0.01, 4, Exec::default()).unwrap();
        assert_eq!(again[0], curve[0]);
        assert!(
            pool_quality_curve(&g, &damaged, &mask, &[5, 1], 0.01, 4, Exec::default()).is_err()
        );
    }
}
