//! Reconstruction quality and temporal consistency measures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, Image, Mask};

/// Peak-to-peak range of `[-1, 1]` images.
pub const PSNR_PEAK: f64 = 2.0;
/// Reported PSNR for (numerically) identical images.
pub const PSNR_CAP: f64 = 100.0;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    ensure_same_shape(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// PSNR in dB with peak 2 and a 100 dB cap.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    psnr_with(a, b, PSNR_PEAK, PSNR_CAP)
}

pub fn psnr_with(a: &Image, b: &Image, peak: f64, cap: f64) -> Result<f64> {
    let err = mse(a, b)?;
    let floor = peak * peak * 10f64.powf(-cap / 10.0);
    if err < floor {
        return Ok(cap);
    }
    Ok(10.0 * (peak * peak / err).log10())
}

/// Per-scale exponents of the five-scale MS-SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Number of scales used for an image whose shorter side is `min_side`:
/// `min(5, floor(log2(min_side)))`, so the coarsest scale keeps at least two
/// pixels per side. A 32-pixel side gets all five scales.
pub fn ms_ssim_scales(min_side: usize) -> usize {
    if min_side < 2 {
        return 0;
    }
    (usize::BITS - 1 - min_side.leading_zeros()).min(5) as usize
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let half = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a row-major plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let ow = w + 1 - n;
    let oh = h + 1 - n;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean luminance and contrast-structure terms of SSIM at one scale.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size.is_multiple_of(2) {
        size -= 1;
    }
    let k = gaussian_window(size);
    let c1 = (SSIM_K1 * PSNR_PEAK).powi(2);
    let c2 = (SSIM_K2 * PSNR_PEAK).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mu_a, oh, ow) = filter_valid(a, h, w, &k);
    let (mu_b, _, _) = filter_valid(b, h, w, &k);
    let (aa, _, _) = filter_valid(&prod(a, a), h, w, &k);
    let (bb, _, _) = filter_valid(&prod(b, b), h, w, &k);
    let (ab, _, _) = filter_valid(&prod(a, b), h, w, &k);
    let mut lum = 0.0;
    let mut cs = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        lum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs += (2.0 * cov + c2) / (va + vb + c2);
    }
    let count = (oh * ow) as f64;
    (lum / count, cs / count)
}

/// 2×2 average pooling, dropping an odd trailing row/column.
fn downsample(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = 0.25
                * (plane[2 * y * w + 2 * x]
                    + plane[2 * y * w + 2 * x + 1]
                    + plane[(2 * y + 1) * w + 2 * x]
                    + plane[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (out, oh, ow)
}

/// Multi-scale SSIM averaged over channels, in `[0, 1]`.
///
/// Gaussian window of 11 taps (σ = 1.5, shrunk to the largest odd size that
/// fits at coarse scales), `K1 = 0.01`, `K2 = 0.03`, dynamic range 2. With
/// fewer than five scales the leading exponents are renormalized to sum to
/// one. Negative contrast-structure terms are clamped to zero.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64> {
    ensure_same_shape(a, b)?;
    let scales = ms_ssim_scales(a.height().min(a.width()));
    if scales == 0 {
        return Err(Error::shape(format!(
            "image {} too small for MS-SSIM",
            a.shape()
        )));
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let wsum: f64 = weights.iter().sum();
    let mut total = 0.0;
    for c in 0..a.channels() {
        let mut pa = a.channel_plane(c);
        let mut pb = b.channel_plane(c);
        let (mut h, mut w) = (a.height(), a.width());
        let mut score = 1.0;
        for (s, weight) in weights.iter().enumerate() {
            let (lum, cs) = ssim_terms(&pa, &pb, h, w);
            let e = weight / wsum;
            score *= cs.max(0.0).powf(e);
            if s + 1 == scales {
                score *= lum.max(0.0).powf(e);
            } else {
                let (na, nh, nw) = downsample(&pa, h, w);
                pb = downsample(&pb, h, w).0;
                pa = na;
                h = nh;
                w = nw;
            }
        }
        total += score;
    }
    Ok((total / a.channels() as f64).clamp(0.0, 1.0))
}

/// Mean PSNR over all unordered frame pairs.
pub fn temporal_consistency_eta(frames: &[Image]) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::InvalidValue(
            "temporal consistency needs at least 2 frames".into(),
        ));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for j in 0..frames.len() {
        for k in j + 1..frames.len() {
            sum += psnr(&frames[j], &frames[k])?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Mean over consecutive frame pairs of the mean absolute difference.
pub fn flicker(frames: &[Image]) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::InvalidValue(
            "flicker needs at least 2 frames".into(),
        ));
    }
    let mut sum = 0.0;
    for pair in frames.windows(2) {
        ensure_same_shape(&pair[0], &pair[1])?;
        let mad: f64 = pair[0]
            .data()
            .iter()
            .zip(pair[1].data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / pair[0].data().len() as f64;
        sum += mad;
    }
    Ok(sum / (frames.len() - 1) as f64)
}

/// Random rectangular block masks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskGenSpec {
    /// Target fraction of damaged pixels.
    pub coverage: f64,
    /// Block sides are drawn from `[min_block, max_block]` times the image side.
    pub min_block: f64,
    pub max_block: f64,
}

impl Default for MaskGenSpec {
    fn default() -> Self {
        MaskGenSpec {
            coverage: 0.25,
            min_block: 0.15,
            max_block: 0.45,
        }
    }
}

impl MaskGenSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.coverage > 0.0 && self.coverage < 1.0) {
            return Err(Error::Config(format!(
                "coverage {} outside (0, 1)",
                self.coverage
            )));
        }
        if !(self.min_block > 0.0 && self.min_block <= self.max_block && self.max_block <= 1.0) {
            return Err(Error::Config(
                "block size bounds must satisfy 0 < min <= max <= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Drops random rectangles until `round(coverage · H · W)` pixels are damaged.
/// The final rectangle is filled in raster order only up to the target, so
/// the coverage is exact.
pub fn random_block_mask(
    height: usize,
    width: usize,
    spec: &MaskGenSpec,
    rng: &mut impl Rng,
) -> Result<Mask> {
    spec.validate()?;
    let total = height * width;
    let target = ((spec.coverage * total as f64).round() as usize).clamp(1, total - 1);
    let mut data = vec![true; total];
    let mut damaged = 0;
    let side = |n: usize, rng: &mut dyn rand::RngCore| {
        let lo = ((spec.min_block * n as f64).round() as usize).max(1);
        let hi = ((spec.max_block * n as f64).round() as usize).clamp(lo, n);
        rng.gen_range(lo..=hi)
    };
    while damaged < target {
        let bh = side(height, rng);
        let bw = side(width, rng);
        let y0 = rng.gen_range(0..=height - bh);
        let x0 = rng.gen_range(0..=width - bw);
        'block: for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                let i = y * width + x;
                if data[i] {
                    data[i] = false;
                    damaged += 1;
                    if damaged == target {
                        break 'block;
                    }
                }
            }
        }
    }
    Mask::new(height, width, data)
}

/// One image seen through `S` distinct masks.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoSequence {
    pub base: Image,
    pub masks: Vec<Mask>,
    pub seed: u64,
}

impl PseudoSequence {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// `(frame, mask)` pairs; every frame is the base image.
    pub fn frames(&self) -> Vec<(Image, Mask)> {
        self.masks
            .iter()
            .map(|m| (self.base.clone(), m.clone()))
            .collect()
    }
}

pub fn make_pseudo_sequence(
    base: &Image,
    length: usize,
    spec: &MaskGenSpec,
    seed: u64,
) -> Result<PseudoSequence> {
    if length < 2 {
        return Err(Error::Config(
            "pseudo-sequence needs at least 2 frames".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks: Vec<Mask> = Vec::with_capacity(length);
    let mut attempts = 0;
    while masks.len() < length {
        attempts += 1;
        if attempts > 100 * length {
            return Err(Error::InvalidValue(format!(
                "could not draw {length} distinct masks for a {}x{} image",
                base.height(),
                base.width()
            )));
        }
        let m = random_block_mask(base.height(), base.width(), spec, &mut rng)?;
        if !masks.contains(&m) {
            masks.push(m);
        }
    }
    Ok(PseudoSequence {
        base: base.clone(),
        masks,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn random_image(rng: &mut impl Rng, shape: Shape) -> Image {
        Image::from_vec(
            shape,
            (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let shape = Shape::new(4, 4, 3);
        let a = Image::filled(shape, 0.1).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b = Image::filled(shape, 0.3).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Image::filled(Shape::new(4, 4, 1), 0.0).unwrap()).is_err());
    }

    #[test]
    fn psnr_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = Shape::new(7, 5, 2);
        let a = random_image(&mut rng, shape);
        let b = random_image(&mut rng, shape);
        let mut s = 0.0;
        for i in 0..shape.len() {
            s += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
        }
        let oracle = 10.0 * (4.0 / (s / shape.len() as f64)).log10();
        assert!((psnr(&a, &b).unwrap() - oracle).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = Shape::new(8, 8, 1);
        let a = random_image(&mut rng, shape);
        let noise = random_image(&mut rng, shape);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.05, 0.1, 0.3] {
            let b = a.axpby(1.0, &noise, amp).unwrap();
            let p = psnr(&a, &b).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn scale_rule() {
        assert_eq!(ms_ssim_scales(32), 5);
        assert_eq!(ms_ssim_scales(128), 5);
        assert_eq!(ms_ssim_scales(16), 4);
        assert_eq!(ms_ssim_scales(3), 1);
        assert_eq!(ms_ssim_scales(1), 0);
    }

    #[test]
    fn ms_ssim_identity_symmetry_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = Shape::new(32, 32, 1);
        let a = random_image(&mut rng, shape).map(|v| 0.8 * v).unwrap();
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let mean = a.data().iter().sum::<f64>() / a.data().len() as f64;
        let flat = Image::filled(shape, mean).unwrap();
        assert!(ms_ssim(&a, &flat).unwrap() < 1.0);
        let b = random_image(&mut rng, shape);
        assert!((ms_ssim(&a, &b).unwrap() - ms_ssim(&b, &a).unwrap()).abs() <= 1e-12);
        assert!(ms_ssim(
            &Image::zeros(Shape::new(1, 5, 1)).unwrap(),
            &Image::zeros(Shape::new(1, 5, 1)).unwrap()
        )
        .is_err());
    }

    #[test]
    fn ms_ssim_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = Shape::new(32, 32, 3);
        // smooth base image
        let base = Image::from_vec(
            shape,
            (0..shape.len())
                .map(|i| {
                    let p = i / 3;
                    ((p % 32) as f64 / 6.0).sin() * ((p / 32) as f64 / 9.0).cos() * 0.7
                })
                .collect(),
        )
        .unwrap();
        let noise = random_image(&mut rng, shape);
        let mut last = 1.0 + 1e-12;
        for amp in [0.02, 0.05, 0.1, 0.2, 0.4] {
            let v = ms_ssim(&base, &base.axpby(1.0, &noise, amp).unwrap()).unwrap();
            assert!(v < last, "{amp}: {v} !< {last}");
            last = v;
        }
    }

    #[test]
    fn eta_examples() {
        let shape = Shape::new(4, 4, 1);
        let a = Image::filled(shape, 0.2).unwrap();
        assert_eq!(
            temporal_consistency_eta(&[a.clone(), a.clone(), a.clone()]).unwrap(),
            100.0
        );
        assert!(temporal_consistency_eta(std::slice::from_ref(&a)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames: Vec<Image> = (0..5).map(|_| random_image(&mut rng, shape)).collect();
        let mut oracle = 0.0;
        let mut n = 0;
        for j in 0..5 {
            for k in 0..5 {
                if j < k {
                    oracle += psnr(&frames[j], &frames[k]).unwrap();
                    n += 1;
                }
            }
        }
        assert_eq!(n, 10);
        assert!((temporal_consistency_eta(&frames).unwrap() - oracle / 10.0).abs() < 1e-9);
        let mut perm = frames.clone();
        perm.rotate_left(2);
        assert!((temporal_consistency_eta(&perm).unwrap() - oracle / 10.0).abs() < 1e-9);
    }

    #[test]
    fn flicker_examples() {
        let shape = Shape::new(3, 3, 1);
        let a = Image::filled(shape, 0.2).unwrap();
        assert_eq!(flicker(&[a.clone(), a.clone()]).unwrap(), 0.0);
        let b = Image::filled(shape, 0.3).unwrap();
        assert!((flicker(&[a.clone(), b.clone()]).unwrap() - 0.1).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frames: Vec<Image> = (0..4).map(|_| random_image(&mut rng, shape)).collect();
        let mut oracle = 0.0;
        for t in 0..3 {
            let mut s = 0.0;
            for i in 0..9 {
                s += (frames[t].data()[i] - frames[t + 1].data()[i]).abs();
            }
            oracle += s / 9.0;
        }
        assert!((flicker(&frames).unwrap() - oracle / 3.0).abs() < 1e-12);
        assert!(flicker(&frames[..1]).is_err());
    }

    #[test]
    fn pseudo_sequences() {
        let base = Image::filled(Shape::new(16, 16, 1), 0.0).unwrap();
        let spec = MaskGenSpec::default();
        let a = make_pseudo_sequence(&base, 5, &spec, 9).unwrap();
        let b = make_pseudo_sequence(&base, 5, &spec, 9).unwrap();
        assert_eq!(a, b);
        for (i, m) in a.masks.iter().enumerate() {
            assert!(m.data().iter().any(|&v| v));
            for other in &a.masks[i + 1..] {
                assert_ne!(m, other);
            }
        }
        assert!(make_pseudo_sequence(&base, 1, &spec, 9).is_err());
        // a 1x2 image has only two masks with exactly one damaged pixel
        let tiny = Image::filled(Shape::new(1, 2, 1), 0.0).unwrap();
        assert!(make_pseudo_sequence(
            &tiny,
            3,
            &MaskGenSpec {
                coverage: 0.5,
                ..spec
            },
            1
        )
        .is_err());
    }

    #[test]
    fn block_coverage_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for coverage in [0.1, 0.25, 0.4] {
            let spec = MaskGenSpec {
                coverage,
                ..MaskGenSpec::default()
            };
            let mut total = 0.0;
            for _ in 0..100 {
                let m = random_block_mask(32, 32, &spec, &mut rng).unwrap();
                let holes = m.data().iter().filter(|&&v| !v).count();
                total += holes as f64 / 1024.0;
            }
            assert!((total / 100.0 - coverage).abs() <= 0.02);
        }
    }
}
