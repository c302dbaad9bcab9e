//! PNG images and masks, frame directories, and JSON helpers.
//!
//! Pixels map linearly from `[0, 255]` to `[-1, 1]`. Masks are 8-bit PNGs
//! holding only 0 (damaged) and 255 (known).

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{InitStrategy, InpaintConfig, SequenceMode};
use crate::tensor::{Image, Mask, Shape};

fn file_error(path: &Path, message: impl Into<String>) -> Error {
    Error::File {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Raw 8-bit pixels and their geometry.
struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    bytes: Vec<u8>,
}

fn read_png(path: &Path) -> Result<Raster> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder
        .read_info()
        .map_err(|e| file_error(path, format!("not a readable PNG: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| file_error(path, format!("cannot decode PNG: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(file_error(
            path,
            format!("unsupported bit depth {:?}; expected 8-bit", info.bit_depth),
        ));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(file_error(
                path,
                format!("unsupported color type {other:?}; expected grayscale or RGB"),
            ))
        }
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let row = width * channels;
    let bytes = if info.line_size == row {
        buf.truncate(row * height);
        buf
    } else {
        buf.chunks(info.line_size)
            .take(height)
            .flat_map(|line| line[..row].iter().copied())
            .collect()
    };
    Ok(Raster {
        width,
        height,
        channels,
        bytes,
    })
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
    bytes: &[u8],
) -> Result<()> {
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(file_error(path, format!("cannot write {c}-channel PNG"))),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| file_error(path, e.to_string()))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| file_error(path, e.to_string()))?;
    writer.finish().map_err(|e| file_error(path, e.to_string()))
}

pub fn byte_to_unit(v: u8) -> f64 {
    f64::from(v) * 2.0 / 255.0 - 1.0
}

/// Inverse of [`byte_to_unit`] with clamping and round-half-up.
pub fn unit_to_byte(v: f64) -> u8 {
    let scaled = (v + 1.0) * 255.0 / 2.0;
    (scaled + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn load_image(path: &Path) -> Result<Image> {
    let r = read_png(path)?;
    let data = r.bytes.iter().map(|&b| byte_to_unit(b)).collect();
    Image::from_vec(Shape::new(r.height, r.width, r.channels), data)
}

pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image.data().iter().map(|&v| unit_to_byte(v)).collect();
    write_png(
        path,
        image.width(),
        image.height(),
        image.channels(),
        &bytes,
    )
}

/// Reads a mask; RGB masks must have equal channels.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let r = read_png(path)?;
    let mut values = Vec::with_capacity(r.width * r.height);
    for px in r.bytes.chunks(r.channels) {
        if px.iter().any(|&b| b != px[0]) {
            return Err(file_error(path, "mask pixels must be gray"));
        }
        values.push(match px[0] {
            0 => 0.0,
            255 => 1.0,
            v => {
                return Err(file_error(
                    path,
                    format!("mask value {v} is neither 0 nor 255"),
                ))
            }
        });
    }
    Mask::from_values(r.height, r.width, &values).map_err(|e| e.context(path.display().to_string()))
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = mask
        .data()
        .iter()
        .map(|&k| if k { 255 } else { 0 })
        .collect();
    write_png(path, mask.width(), mask.height(), 1, &bytes)
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:04}.png"))
}

pub fn mask_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("mask_{index:04}.png"))
}

fn numbered(name: &str, prefix: &str) -> Option<usize> {
    let digits = name.strip_prefix(prefix)?.strip_suffix(".png")?;
    if digits.len() < 4 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

struct Listing {
    frames: usize,
    masks: Vec<usize>,
}

fn list_sequence(dir: &Path) -> Result<Listing> {
    let listing = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::new();
    let mut masks = Vec::new();
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(i) = numbered(name, "frame_") {
            frames.push(i);
        } else if let Some(i) = numbered(name, "mask_") {
            masks.push(i);
        }
    }
    if frames.is_empty() {
        return Err(file_error(dir, "no frame_%04d.png files found"));
    }
    frames.sort_unstable();
    masks.sort_unstable();
    for (expected, &i) in frames.iter().enumerate() {
        if i != expected {
            return Err(Error::Sequence(format!(
                "{} is missing (frames must be numbered contiguously from 0)",
                frame_path(dir, expected).display()
            )));
        }
    }
    Ok(Listing {
        frames: frames.len(),
        masks,
    })
}

/// Reads `frame_%04d.png` files with contiguous indices starting at 0.
pub fn load_frames(dir: &Path) -> Result<Vec<Image>> {
    let n = list_sequence(dir)?.frames;
    let mut out: Vec<Image> = Vec::with_capacity(n);
    for t in 0..n {
        let image = load_image(&frame_path(dir, t))?;
        if let Some(first) = out.first() {
            if image.shape() != first.shape() {
                return Err(Error::Sequence(format!(
                    "frame {t} has shape {}, frame 0 has {}",
                    image.shape(),
                    first.shape()
                )));
            }
        }
        out.push(image);
    }
    Ok(out)
}

/// Reads `frame_%04d.png` / `mask_%04d.png` pairs with contiguous indices
/// starting at 0.
pub fn load_sequence(dir: &Path) -> Result<Vec<(Image, Mask)>> {
    let listing = list_sequence(dir)?;
    if let Some(&extra) = listing.masks.iter().find(|&&i| i >= listing.frames) {
        return Err(Error::Sequence(format!(
            "{} has no matching frame",
            mask_path(dir, extra).display()
        )));
    }
    for t in 0..listing.frames {
        let mp = mask_path(dir, t);
        if !mp.exists() {
            return Err(Error::Sequence(format!("{} is missing", mp.display())));
        }
    }
    let frames = load_frames(dir)?;
    frames
        .into_iter()
        .enumerate()
        .map(|(t, image)| {
            let mask = load_mask(&mask_path(dir, t))?;
            mask.check_image(&image)
                .map_err(|e| e.context(format!("frame {t}")))?;
            Ok((image, mask))
        })
        .collect()
}

/// Writes frames (and masks, if given) using the sequence naming scheme.
pub fn save_sequence(dir: &Path, images: &[Image], masks: Option<&[Mask]>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, image) in images.iter().enumerate() {
        save_image(image, &frame_path(dir, t))?;
        if let Some(m) = masks.and_then(|m| m.get(t)) {
            save_mask(m, &mask_path(dir, t))?;
        }
    }
    Ok(())
}

/// Parses a JSON file; unknown keys are rejected by the target types.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| file_error(path, e.to_string()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| file_error(path, e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Settings for an `inpaint` or `inpaint-seq` run. Relative paths in a
/// config file are resolved against the file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub generator: PathBuf,
    pub discriminator: PathBuf,
    #[serde(default)]
    pub pool: Option<PathBuf>,
    /// Image file, or frame directory for sequences.
    pub input: PathBuf,
    /// Mask file for single images.
    #[serde(default)]
    pub mask: Option<PathBuf>,
    /// Output image, or output directory for sequences.
    pub output: PathBuf,
    #[serde(default)]
    pub inpaint: InpaintConfig,
    #[serde(default = "default_mode")]
    pub mode: SequenceMode,
    /// Overrides `inpaint.optim.seed` when set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub report: Option<PathBuf>,
}

fn default_mode() -> SequenceMode {
    SequenceMode::Reuse
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut config: RunConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.generator);
        resolve(&mut config.discriminator);
        resolve(&mut config.input);
        resolve(&mut config.output);
        for p in [&mut config.pool, &mut config.mask, &mut config.report]
            .into_iter()
            .flatten()
        {
            resolve(p);
        }
        Ok(config)
    }

    /// The inpainting settings with the seed override applied.
    pub fn effective_inpaint(&self) -> InpaintConfig {
        let mut c = self.inpaint.clone();
        if let Some(seed) = self.seed {
            c.optim.seed = seed;
        }
        c
    }

    /// Checks settings and that every referenced input exists.
    pub fn validate(&self, sequence: bool) -> Result<()> {
        self.inpaint.validate()?;
        if self.inpaint.init == InitStrategy::Pool && self.pool.is_none() {
            return Err(Error::Config(
                "pool initialization requires a pool file".into(),
            ));
        }
        if !sequence && self.mask.is_none() {
            return Err(Error::Config("single-image runs need a mask file".into()));
        }
        let inputs = [
            Some(&self.generator),
            Some(&self.discriminator),
            self.pool.as_ref(),
            Some(&self.input),
            self.mask.as_ref(),
        ];
        for p in inputs.into_iter().flatten() {
            if !p.exists() {
                return Err(file_error(p, "file does not exist"));
            }
        }
        Ok(())
    }
}
