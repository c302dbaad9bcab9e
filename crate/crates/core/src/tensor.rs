//! Dense rasters, masks and latent vectors.
//!
//! Images are stored row-major with interleaved channels: the value for pixel
//! `(y, x)` and channel `c` lives at `(y * width + x) * channels + c`. Masks
//! are per-pixel and broadcast across channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Shape {
            height,
            width,
            channels,
        }
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    shape: Shape,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from raw values. Values must be finite but may leave
    /// `[-1, 1]` (residuals, cotangents, gradients).
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.channels == 0 || shape.height == 0 || shape.width == 0 {
            return Err(Error::shape(format!("degenerate image shape {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "image {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite image value at index {i}"
            )));
        }
        Ok(Image { shape, data })
    }

    /// Builds an image whose values must lie in `[-1, 1]`, the range of
    /// generator outputs and loaded datasets.
    pub fn from_unit_range(shape: Shape, data: Vec<f64>) -> Result<Self> {
        let image = Self::from_vec(shape, data)?;
        if let Some(i) = image.data.iter().position(|v| v.abs() > 1.0) {
            return Err(Error::InvalidValue(format!(
                "image value {} at index {i} outside [-1, 1]",
                image.data[i]
            )));
        }
        Ok(image)
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self> {
        Self::from_vec(shape, vec![value; shape.len()])
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.shape.width + x) * self.shape.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    /// Values of one channel as a row-major `height * width` plane.
    pub fn channel_plane(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.shape.channels)
            .copied()
            .collect()
    }

    /// Rounds every value to the nearest `f32`, the precision of the on-disk
    /// formats.
    pub fn round_to_f32(&self) -> Image {
        Image {
            shape: self.shape,
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Image> {
        Image::from_vec(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// `alpha * self + beta * other`.
    pub fn axpby(&self, alpha: f64, other: &Image, beta: f64) -> Result<Image> {
        ensure_same_shape(self, other)?;
        Image::from_vec(
            self.shape,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| alpha * a + beta * b)
                .collect(),
        )
    }

    pub fn transpose(&self) -> Image {
        let Shape {
            height,
            width,
            channels,
        } = self.shape;
        let shape = Shape::new(width, height, channels);
        let mut data = vec![0.0; self.data.len()];
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data[(x * height + y) * channels + c] = self.get(y, x, c);
                }
            }
        }
        Image { shape, data }
    }
}

pub(crate) fn ensure_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "image shapes differ: {} vs {}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// Binary per-pixel mask: `false` (0) on damaged pixels, `true` (1) elsewhere.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(Error::shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if !data.iter().any(|&b| b) {
            return Err(Error::InvalidValue(
                "mask has no known pixels; fidelity would be vacuous".into(),
            ));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    /// Builds a mask from numeric values that must each be exactly 0 or 1.
    pub fn from_values(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let data = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v == 0.0 {
                    Ok(false)
                } else if v == 1.0 {
                    Ok(true)
                } else {
                    Err(Error::InvalidValue(format!(
                        "mask value {v} at index {i} is not 0 or 1"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, data)
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![true; height * width])
    }

    /// Mask with a centered square hole covering (approximately) `fraction`
    /// of the pixels.
    pub fn center_hole(height: usize, width: usize, fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!(
                "hole fraction {fraction} outside [0, 1)"
            )));
        }
        let side = fraction.sqrt();
        let hh = ((height as f64) * side).round() as usize;
        let hw = ((width as f64) * side).round() as usize;
        let y0 = (height - hh) / 2;
        let x0 = (width - hw) / 2;
        let mut data = vec![true; height * width];
        for y in y0..y0 + hh {
            for x in x0..x0 + hw {
                data[y * width + x] = false;
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Fraction of pixels marked as damaged.
    pub fn hole_fraction(&self) -> f64 {
        self.data.iter().filter(|&&b| !b).count() as f64 / self.data.len() as f64
    }

    pub(crate) fn check_image(&self, image: &Image) -> Result<()> {
        if image.height() != self.height || image.width() != self.width {
            return Err(Error::shape(format!(
                "mask {}x{} does not match image {}",
                self.height,
                self.width,
                image.shape()
            )));
        }
        Ok(())
    }
}

/// A latent vector of the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent(Vec<f64>);

impl Latent {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite latent component at index {i}"
            )));
        }
        Ok(Latent(data))
    }

    pub fn zeros(dim: usize) -> Self {
        Latent(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Projects onto the box `[-1, 1]^d`.
    pub fn clamp_unit(&self) -> Latent {
        Latent(self.0.iter().map(|v| v.clamp(-1.0, 1.0)).collect())
    }

    pub fn l1_distance(&self, other: &Latent) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    pub fn round_to_f32(&self) -> Latent {
        Latent(self.0.iter().map(|&v| v as f32 as f64).collect())
    }
}

/// `I_d = M ⊙ I`. Damaged pixels are set to exactly `+0.0`.
pub fn mask_apply(image: &Image, mask: &Mask) -> Result<Image> {
    mask.check_image(image)?;
    let c = image.channels();
    let data = image
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask.data[i / c] { v } else { 0.0 })
        .collect();
    Ok(Image {
        shape: image.shape,
        data,
    })
}

/// Horizontal forward difference; the last column is zero.
pub fn grad_x(image: &Image) -> Result<Image> {
    let Shape {
        height,
        width,
        channels,
    } = image.shape;
    if width < 2 {
        return Err(Error::shape("grad_x needs width >= 2"));
    }
    let mut data = vec![0.0; image.data.len()];
    for y in 0..height {
        for x in 0..width - 1 {
            for c in 0..channels {
                data[image.index(y, x, c)] = image.get(y, x + 1, c) - image.get(y, x, c);
            }
        }
    }
    Image::from_vec(image.shape, data)
}

/// Vertical forward difference; the last row is zero.
pub fn grad_y(image: &Image) -> Result<Image> {
    let Shape {
        height,
        width,
        channels,
    } = image.shape;
    if height < 2 {
        return Err(Error::shape("grad_y needs height >= 2"));
    }
    let mut data = vec![0.0; image.data.len()];
    for y in 0..height - 1 {
        for x in 0..width {
            for c in 0..channels {
                data[image.index(y, x, c)] = image.get(y + 1, x, c) - image.get(y, x, c);
            }
        }
    }
    Image::from_vec(image.shape, data)
}

/// `Σ |a − b|`, optionally restricted to pixels where `weight` is 1.
pub fn l1_sum(a: &Image, b: &Image, weight: Option<&Mask>) -> Result<f64> {
    ensure_same_shape(a, b)?;
    match weight {
        None => Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum()),
        Some(mask) => {
            mask.check_image(a)?;
            let c = a.channels();
            Ok(a.data
                .iter()
                .zip(&b.data)
                .enumerate()
                .filter(|(i, _)| mask.data[i / c])
                .map(|(_, (x, y))| (x - y).abs())
                .sum())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, v: &[f64]) -> Image {
        Image::from_vec(Shape::new(h, w, 1), v.to_vec()).unwrap()
    }

    #[test]
    fn identity_mask_keeps_image() {
        let img = gray(2, 2, &[0.1, -0.2, 0.3, 0.9]);
        let m = Mask::ones(2, 2).unwrap();
        assert_eq!(mask_apply(&img, &m).unwrap(), img);
    }

    #[test]
    fn all_zero_mask_rejected() {
        assert!(Mask::new(2, 2, vec![false; 4]).is_err());
        assert!(Mask::from_values(1, 2, &[0.0, 0.5]).is_err());
    }

    #[test]
    fn mask_apply_small_case() {
        let img = gray(2, 2, &[0.5, -0.5, 1.0, -1.0]);
        let m = Mask::from_values(2, 2, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(mask_apply(&img, &m).unwrap().data(), &[0.5, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn mask_apply_shape_mismatch() {
        let img = gray(2, 2, &[0.0; 4]);
        let m = Mask::ones(2, 3).unwrap();
        assert!(matches!(mask_apply(&img, &m), Err(Error::Shape(_))));
    }

    #[test]
    fn gradient_examples() {
        let c = Image::filled(Shape::new(3, 4, 2), 0.3).unwrap();
        assert!(grad_x(&c).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grad_y(&c).unwrap().data().iter().all(|&v| v == 0.0));

        let row = gray(1, 3, &[0.0, 1.0, 3.0]);
        assert_eq!(grad_x(&row).unwrap().data(), &[1.0, 2.0, 0.0]);
        assert!(grad_y(&row).is_err());
        assert!(grad_x(&gray(3, 1, &[0.0; 3])).is_err());

        // horizontal step edge: top rows -1, bottom rows 1
        let mut v = vec![-1.0; 8];
        v[4..].fill(1.0);
        let edge = gray(4, 2, &v);
        assert_eq!(
            grad_y(&edge).unwrap(),
            grad_x(&edge.transpose()).unwrap().transpose()
        );
    }

    #[test]
    fn l1_examples() {
        let a = gray(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(l1_sum(&a, &a, None).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1).unwrap();
        assert!((l1_sum(&a, &b, None).unwrap() - 0.4).abs() < 1e-12);

        let c = gray(2, 2, &[0.1, 0.2, 0.6, 5.0]);
        let m = Mask::from_values(2, 2, &[0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((l1_sum(&a, &c, Some(&m)).unwrap() - 0.3).abs() < 1e-12);
    }

    fn image_strategy(h: usize, w: usize, c: usize) -> impl Strategy<Value = Image> {
        prop::collection::vec(-1.0f64..1.0, h * w * c)
            .prop_map(move |v| Image::from_vec(Shape::new(h, w, c), v).unwrap())
    }

    fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = Mask> {
        prop::collection::vec(any::<bool>(), h * w).prop_map(move |mut v| {
            v[0] = true;
            Mask::new(h, w, v).unwrap()
        })
    }

    proptest! {
        #[test]
        fn mask_apply_idempotent(img in image_strategy(4, 5, 3), m in mask_strategy(4, 5)) {
            let once = mask_apply(&img, &m).unwrap();
            prop_assert_eq!(mask_apply(&once, &m).unwrap(), once);
        }

        #[test]
        fn gradients_linear(
            a in image_strategy(4, 5, 2),
            b in image_strategy(4, 5, 2),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let mix = a.axpby(alpha, &b, beta).unwrap();
            for op in [grad_x, grad_y] {
                let lhs = op(&mix).unwrap();
                let rhs = op(&a).unwrap().axpby(alpha, &op(&b).unwrap(), beta).unwrap();
                for (l, r) in lhs.data().iter().zip(rhs.data()) {
                    prop_assert!((l - r).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn l1_symmetric_nonneg(a in image_strategy(3, 3, 1), b in image_strategy(3, 3, 1), m in mask_strategy(3, 3)) {
            prop_assert_eq!(l1_sum(&a, &b, None).unwrap(), l1_sum(&b, &a, None).unwrap());
            prop_assert_eq!(l1_sum(&a, &b, Some(&m)).unwrap(), l1_sum(&b, &a, Some(&m)).unwrap());
            prop_assert!(l1_sum(&a, &b, Some(&m)).unwrap() >= 0.0);
        }
    }
}
