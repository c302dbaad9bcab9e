//! Analytic procedural generator: a sum of isotropic Gaussian blobs squashed
//! through `tanh`.
//!
//! Each blob owns `3 + C` latent components laid out as
//! `[cx, cy, sigma, a_0 .. a_{C-1}]`. Components are decoded affinely from
//! `[-1, 1]`: centers span the pixel grid, amplitudes span `[-A, A]`, and the
//! radius is affine in log space between `sigma_min` and `sigma_max`, so the
//! decoding stays well defined for every finite latent.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Fingerprint, Generator};
use crate::error::{Error, Result};
use crate::tensor::{Image, Latent, Shape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobGeneratorSpec {
    pub blobs: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Amplitude bound `A`; amplitudes decode to `[-A, A]`.
    pub amplitude: f64,
}

impl Default for BlobGeneratorSpec {
    fn default() -> Self {
        BlobGeneratorSpec {
            blobs: 3,
            height: 32,
            width: 32,
            channels: 1,
            sigma_min: 2.5,
            sigma_max: 7.0,
            amplitude: 1.5,
        }
    }
}

impl BlobGeneratorSpec {
    pub fn latent_dim(&self) -> usize {
        self.blobs * (3 + self.channels)
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width, self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blobs == 0 {
            return Err(Error::Config(
                "blob generator needs at least one blob".into(),
            ));
        }
        if self.height < 2 || self.width < 2 || self.channels == 0 {
            return Err(Error::Config(format!(
                "blob raster {}x{}x{} too small",
                self.height, self.width, self.channels
            )));
        }
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min && self.sigma_max.is_finite())
        {
            return Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Config(format!(
                "amplitude must be positive, got {}",
                self.amplitude
            )));
        }
        Ok(())
    }
}

/// Physical parameters of one blob.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub sigma: f64,
    pub amplitudes: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BlobGenerator {
    spec: BlobGeneratorSpec,
}

impl BlobGenerator {
    pub fn new(spec: BlobGeneratorSpec) -> Result<Self> {
        spec.validate()?;
        Ok(BlobGenerator { spec })
    }

    pub fn spec(&self) -> &BlobGeneratorSpec {
        &self.spec
    }

    fn check_latent(&self, z: &Latent) -> Result<()> {
        if z.dim() != self.spec.latent_dim() {
            return Err(Error::shape(format!(
                "blob generator expects latent of length {}, got {}",
                self.spec.latent_dim(),
                z.dim()
            )));
        }
        Ok(())
    }

    fn log_sigma_span(&self) -> f64 {
        (self.spec.sigma_max / self.spec.sigma_min).ln()
    }

    /// Decodes the latent into blob parameters.
    pub fn decode(&self, z: &Latent) -> Result<Vec<Blob>> {
        self.check_latent(z)?;
        let s = &self.spec;
        let stride = 3 + s.channels;
        let span = self.log_sigma_span();
        Ok(z.as_slice()
            .chunks(stride)
            .map(|p| Blob {
                cx: (p[0] + 1.0) * 0.5 * (s.width - 1) as f64,
                cy: (p[1] + 1.0) * 0.5 * (s.height - 1) as f64,
                // floored so that absurdly negative latents cannot underflow to 0
                sigma: (s.sigma_min * ((p[2] + 1.0) * 0.5 * span).exp()).max(s.sigma_min * 1e-6),
                amplitudes: p[3..].iter().map(|a| a * s.amplitude).collect(),
            })
            .collect())
    }

    /// Separable Gaussian factors `exp(-(x-cx)^2 / 2s^2)` along each axis.
    fn factors(&self, blob: &Blob) -> (Vec<f64>, Vec<f64>) {
        let inv = 1.0 / (2.0 * blob.sigma * blob.sigma);
        let ex = (0..self.spec.width)
            .map(|x| {
                let d = x as f64 - blob.cx;
                (-d * d * inv).exp()
            })
            .collect();
        let ey = (0..self.spec.height)
            .map(|y| {
                let d = y as f64 - blob.cy;
                (-d * d * inv).exp()
            })
            .collect();
        (ex, ey)
    }

    /// Pre-activation sums `Σ_k a_kc g_k(y, x)`, interleaved like an image.
    fn pre_activation(&self, blobs: &[Blob]) -> Vec<f64> {
        let s = &self.spec;
        let c = s.channels;
        let mut acc = vec![0.0; s.height * s.width * c];
        for blob in blobs {
            let (ex, ey) = self.factors(blob);
            for (y, &gy) in ey.iter().enumerate() {
                let row = &mut acc[y * s.width * c..(y + 1) * s.width * c];
                for (x, &gx) in ex.iter().enumerate() {
                    let g = gx * gy;
                    for (ch, a) in blob.amplitudes.iter().enumerate() {
                        row[x * c + ch] += a * g;
                    }
                }
            }
        }
        acc
    }
}

impl Generator for BlobGenerator {
    fn latent_dim(&self) -> usize {
        self.spec.latent_dim()
    }

    fn output_shape(&self) -> Shape {
        self.spec.shape()
    }

    fn forward(&self, z: &Latent) -> Result<Image> {
        let blobs = self.decode(z)?;
        let data = self
            .pre_activation(&blobs)
            .into_iter()
            .map(f64::tanh)
            .collect();
        Image::from_unit_range(self.spec.shape(), data)
    }

    fn vjp(&self, z: &Latent, cotangent: &Image) -> Result<Latent> {
        let blobs = self.decode(z)?;
        let s = &self.spec;
        if cotangent.shape() != s.shape() {
            return Err(Error::shape(format!(
                "cotangent {} does not match generator output {}",
                cotangent.shape(),
                s.shape()
            )));
        }
        let c = s.channels;
        // u = cotangent * tanh'(pre)
        let u: Vec<f64> = self
            .pre_activation(&blobs)
            .iter()
            .zip(cotangent.data())
            .map(|(&p, &g)| {
                let t = p.tanh();
                g * (1.0 - t * t)
            })
            .collect();

        let span = self.log_sigma_span();
        let dcx_dz = 0.5 * (s.width - 1) as f64;
        let dcy_dz = 0.5 * (s.height - 1) as f64;
        let mut grad = Vec::with_capacity(s.latent_dim());
        for blob in &blobs {
            let (ex, ey) = self.factors(blob);
            let inv_s2 = 1.0 / (blob.sigma * blob.sigma);
            let mut d_cx = 0.0;
            let mut d_cy = 0.0;
            let mut d_sigma = 0.0;
            let mut d_amp = vec![0.0; c];
            for (y, &gy) in ey.iter().enumerate() {
                let dy = y as f64 - blob.cy;
                for (x, &gx) in ex.iter().enumerate() {
                    let dx = x as f64 - blob.cx;
                    let g = gx * gy;
                    let base = (y * s.width + x) * c;
                    let mut w = 0.0;
                    for ch in 0..c {
                        let uc = u[base + ch];
                        w += blob.amplitudes[ch] * uc;
                        d_amp[ch] += uc * g;
                    }
                    let wg = w * g;
                    d_cx += wg * dx;
                    d_cy += wg * dy;
                    d_sigma += wg * (dx * dx + dy * dy);
                }
            }
            grad.push(d_cx * inv_s2 * dcx_dz);
            grad.push(d_cy * inv_s2 * dcy_dz);
            // dg/dsigma = g r^2 / sigma^3, dsigma/dz = sigma * span / 2
            grad.push(d_sigma * inv_s2 * 0.5 * span);
            grad.extend(d_amp.iter().map(|d| d * s.amplitude));
        }
        Latent::new(grad)
    }

    fn fingerprint(&self) -> Fingerprint {
        let mut hasher = Sha256::new();
        hasher.update(b"blob-generator\0");
        hasher.update(serde_json::to_vec(&self.spec).expect("spec serializes"));
        Fingerprint(hasher.finalize().into())
    }
}
