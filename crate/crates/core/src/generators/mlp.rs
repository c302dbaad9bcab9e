//! Small fully connected networks and the `LGW1` weight file.
//!
//! Byte layout of a `.lgw` file (all integers `u32`, all floats `f32`,
//! little-endian):
//!
//! ```text
//! magic        4 bytes  "LGW1"
//! layer_count  u32
//! per layer:
//!   rows       u32      output size
//!   cols       u32      input size
//!   activation u32      0 = tanh, 1 = sigmoid
//!   weights    rows*cols f32, row-major
//!   bias       rows f32
//! ```
//!
//! Parameters are held in memory as `f64` values that are exactly
//! representable as `f32`, so saving and reloading a network reproduces its
//! forward pass bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Discriminator, Fingerprint, Generator};
use crate::error::{Error, Result};
use crate::tensor::{Image, Latent, Shape};

pub const LGW_MAGIC: &[u8; 4] = b"LGW1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    fn tag(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Sigmoid => 1,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Sigmoid),
            t => Err(Error::Format(format!("unknown activation tag {t}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl Layer {
    pub fn new(
        rows: usize,
        cols: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Format("layer with zero rows or columns".into()));
        }
        if weights.len() != rows * cols || bias.len() != rows {
            return Err(Error::Format(format!(
                "layer {rows}x{cols} has {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite layer parameter".into()));
        }
        Ok(Layer {
            rows,
            cols,
            weights: weights.into_iter().map(round_f32).collect(),
            bias: bias.into_iter().map(round_f32).collect(),
            activation,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn param_count(&self) -> usize {
        self.rows * (self.cols + 1)
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .chunks(self.cols)
            .zip(&self.bias)
            .map(|(row, b)| {
                let pre: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b;
                self.activation.apply(pre)
            })
            .collect()
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Activations recorded during a forward pass, input first.
pub struct Trace {
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace holds the input")
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Format("network has no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].rows != pair[1].cols {
                return Err(Error::Format(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    i,
                    pair[0].rows,
                    i + 1,
                    pair[1].cols
                )));
            }
        }
        Ok(Mlp { layers })
    }

    /// Xavier-uniform weights and zero biases. `dims` lists layer widths from
    /// input to output.
    pub fn random(dims: &[usize], activations: &[Activation], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::Config(format!(
                "{} widths need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| {
                let (cols, rows) = (w[0], w[1]);
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let weights = (0..rows * cols)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Layer::new(rows, cols, weights, vec![0.0; rows], act)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").rows
    }

    pub fn final_activation(&self) -> Activation {
        self.layers.last().expect("non-empty").activation
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for layer in &self.layers {
            x = layer.apply(&x);
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        for layer in &self.layers {
            let next = layer.apply(activations.last().expect("non-empty"));
            activations.push(next);
        }
        Ok(Trace { activations })
    }

    /// Reverse pass. Returns the cotangent of the input and, when
    /// `param_grads` is given, accumulates parameter gradients into it using
    /// the flat layout of [`Mlp::params`].
    pub fn backward(
        &self,
        trace: &Trace,
        cotangent: &[f64],
        mut param_grads: Option<&mut [f64]>,
    ) -> Result<Vec<f64>> {
        if cotangent.len() != self.output_dim() {
            return Err(Error::shape(format!(
                "network outputs {} values, cotangent has {}",
                self.output_dim(),
                cotangent.len()
            )));
        }
        if let Some(g) = param_grads.as_deref() {
            if g.len() != self.param_count() {
                return Err(Error::shape("parameter gradient buffer has wrong length"));
            }
        }
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.param_count();
        }

        let mut g = cotangent.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.activations[l];
            let output = &trace.activations[l + 1];
            let delta: Vec<f64> = g
                .iter()
                .zip(output)
                .map(|(gi, &y)| gi * layer.activation.derivative_from_output(y))
                .collect();
            if let Some(buf) = param_grads.as_deref_mut() {
                let base = offsets[l];
                let (wg, bg) =
                    buf[base..base + layer.param_count()].split_at_mut(layer.rows * layer.cols);
                for (r, &d) in delta.iter().enumerate() {
                    for (w, &x) in wg[r * layer.cols..(r + 1) * layer.cols]
                        .iter_mut()
                        .zip(input)
                    {
                        *w += d * x;
                    }
                    bg[r] += d;
                }
            }
            let mut next = vec![0.0; layer.cols];
            for (row, &d) in layer.weights.chunks(layer.cols).zip(&delta) {
                for (n, &w) in next.iter_mut().zip(row) {
                    *n += w * d;
                }
            }
            g = next;
        }
        Ok(g)
    }

    /// Input cotangent `Jᵀ · cotangent`.
    pub fn vjp(&self, input: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward_trace(input)?;
        self.backward(&trace, cotangent, None)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Flat parameter vector: per layer, weights row-major then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Overwrites parameters from the flat layout, rounding to `f32`.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite parameter".into()));
        }
        let mut it = params.iter().copied().map(round_f32);
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.param_count() + 12 * self.layers.len());
        out.extend_from_slice(LGW_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.rows as u32).to_le_bytes());
            out.extend_from_slice(&(layer.cols as u32).to_le_bytes());
            out.extend_from_slice(&layer.activation.tag().to_le_bytes());
            for v in layer.weights.iter().chain(&layer.bias) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != LGW_MAGIC {
            return Err(Error::Format("missing LGW1 magic".into()));
        }
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let activation = Activation::from_tag(r.u32()?)?;
            let weights = r.f32s(
                rows.checked_mul(cols)
                    .ok_or_else(|| Error::Format("layer too large".into()))?,
            )?;
            let bias = r.f32s(rows)?;
            layers.push(Layer::new(rows, cols, weights, bias, activation)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last layer",
                bytes.len() - r.pos
            )));
        }
        Self::new(layers)
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint(Sha256::digest(self.to_bytes()).into())
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated weight file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("layer too large".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Generator,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub rows: usize,
    pub cols: usize,
    pub activation: Activation,
}

/// JSON sidecar describing a `.lgw` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpManifest {
    pub format: String,
    pub role: Role,
    /// Weight file, relative to the manifest's directory.
    pub weights: PathBuf,
    /// Image shape `[height, width, channels]` produced (generator) or
    /// consumed (discriminator).
    pub image_shape: [usize; 3],
    pub layers: Vec<LayerManifest>,
}

impl MlpManifest {
    fn describe(role: Role, net: &Mlp, shape: Shape, weights: PathBuf) -> Self {
        MlpManifest {
            format: "LGW1".into(),
            role,
            weights,
            image_shape: [shape.height, shape.width, shape.channels],
            layers: net
                .layers
                .iter()
                .map(|l| LayerManifest {
                    rows: l.rows,
                    cols: l.cols,
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn shape(&self) -> Shape {
        Shape::new(
            self.image_shape[0],
            self.image_shape[1],
            self.image_shape[2],
        )
    }
}

/// Writes `<stem>.lgw` and the manifest at `json_path` (a `.json` file).
/// The manifest is tagged with `"kind": "mlp"` so it doubles as a model
/// descriptor.
pub fn save_mlp(json_path: &Path, role: Role, net: &Mlp, shape: Shape) -> Result<()> {
    let weights_path = json_path.with_extension("lgw");
    let weights_name = PathBuf::from(
        weights_path
            .file_name()
            .ok_or_else(|| Error::Config(format!("bad model path {}", json_path.display())))?,
    );
    fs::write(&weights_path, net.to_bytes()).map_err(|e| Error::io(&weights_path, e))?;
    let manifest = MlpManifest::describe(role, net, shape, weights_name);
    let mut value = serde_json::to_value(&manifest).expect("manifest serializes");
    value
        .as_object_mut()
        .expect("object")
        .insert("kind".into(), "mlp".into());
    let text = serde_json::to_string_pretty(&value).expect("manifest serializes");
    fs::write(json_path, text + "\n").map_err(|e| Error::io(json_path, e))
}

/// Loads a network from its manifest, checking that the weight file agrees
/// with the declared layers.
pub fn load_mlp(json_path: &Path, manifest: &MlpManifest) -> Result<Mlp> {
    if manifest.format != "LGW1" {
        return Err(Error::Format(format!(
            "unsupported format {:?}",
            manifest.format
        )));
    }
    let dir = json_path.parent().unwrap_or_else(|| Path::new("."));
    let weights_path = dir.join(&manifest.weights);
    let bytes = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let net = Mlp::from_bytes(&bytes).map_err(|e| e.context(weights_path.display().to_string()))?;
    let declared: Vec<_> = manifest
        .layers
        .iter()
        .map(|l| (l.rows, l.cols, l.activation))
        .collect();
    let actual: Vec<_> = net
        .layers
        .iter()
        .map(|l| (l.rows, l.cols, l.activation))
        .collect();
    if declared != actual {
        return Err(Error::Format(format!(
            "{}: layers {:?} disagree with manifest {:?}",
            weights_path.display(),
            actual,
            declared
        )));
    }
    Ok(net)
}

/// Network mapping a latent to an image through a final `tanh` layer.
#[derive(Clone, Debug)]
pub struct MlpGenerator {
    net: Mlp,
    shape: Shape,
}

impl MlpGenerator {
    pub fn new(net: Mlp, shape: Shape) -> Result<Self> {
        if net.output_dim() != shape.len() {
            return Err(Error::Format(format!(
                "generator outputs {} values, image {shape} needs {}",
                net.output_dim(),
                shape.len()
            )));
        }
        if net.final_activation() != Activation::Tanh {
            return Err(Error::Format("generator must end in tanh".into()));
        }
        Ok(MlpGenerator { net, shape })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn save(&self, json_path: &Path) -> Result<()> {
        save_mlp(json_path, Role::Generator, &self.net, self.shape)
    }
}

impl Generator for MlpGenerator {
    fn latent_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn output_shape(&self) -> Shape {
        self.shape
    }

    fn forward(&self, z: &Latent) -> Result<Image> {
        Image::from_unit_range(self.shape, self.net.forward(z.as_slice())?)
    }

    fn vjp(&self, z: &Latent, cotangent: &Image) -> Result<Latent> {
        if cotangent.shape() != self.shape {
            return Err(Error::shape(format!(
                "cotangent {} does not match generator output {}",
                cotangent.shape(),
                self.shape
            )));
        }
        Latent::new(self.net.vjp(z.as_slice(), cotangent.data())?)
    }

    fn fingerprint(&self) -> Fingerprint {
        self.net.fingerprint()
    }
}

/// Network mapping an image to a probability through a final sigmoid unit.
#[derive(Clone, Debug)]
pub struct MlpDiscriminator {
    net: Mlp,
    shape: Shape,
}

impl MlpDiscriminator {
    pub fn new(net: Mlp, shape: Shape) -> Result<Self> {
        if net.input_dim() != shape.len() || net.output_dim() != 1 {
            return Err(Error::Format(format!(
                "discriminator must map {} inputs to 1 output, got {} -> {}",
                shape.len(),
                net.input_dim(),
                net.output_dim()
            )));
        }
        if net.final_activation() != Activation::Sigmoid {
            return Err(Error::Format("discriminator must end in sigmoid".into()));
        }
        Ok(MlpDiscriminator { net, shape })
    }

    /// Seeded, untrained discriminator with one tanh hidden layer.
    pub fn random(shape: Shape, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let net = Mlp::random(
            &[shape.len(), hidden, 1],
            &[Activation::Tanh, Activation::Sigmoid],
            rng,
        )?;
        Self::new(net, shape)
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn save(&self, json_path: &Path) -> Result<()> {
        save_mlp(json_path, Role::Discriminator, &self.net, self.shape)
    }
}

impl Discriminator for MlpDiscriminator {
    fn input_shape(&self) -> Shape {
        self.shape
    }

    fn forward(&self, image: &Image) -> Result<f64> {
        if image.shape() != self.shape {
            return Err(Error::shape(format!(
                "discriminator expects {}, got {}",
                self.shape,
                image.shape()
            )));
        }
        Ok(self.net.forward(image.data())?[0])
    }

    fn vjp(&self, image: &Image, cotangent: f64) -> Result<Image> {
        if image.shape() != self.shape {
            return Err(Error::shape(format!(
                "discriminator expects {}, got {}",
                self.shape,
                image.shape()
            )));
        }
        Image::from_vec(self.shape, self.net.vjp(image.data(), &[cotangent])?)
    }
}
