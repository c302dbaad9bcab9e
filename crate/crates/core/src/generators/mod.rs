//! Differentiable generator and discriminator models.

pub mod blob;
pub mod mlp;

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Image, Latent, Shape};

pub use blob::{BlobGenerator, BlobGeneratorSpec};
pub use mlp::{Activation, Mlp, MlpDiscriminator, MlpGenerator, MlpManifest, Role};

/// SHA-256 identity of a generator, stored in pools to detect stale files.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({self})")
    }
}

/// A map from latents to images with a vector-Jacobian product.
pub trait Generator: Send + Sync {
    fn latent_dim(&self) -> usize;
    fn output_shape(&self) -> Shape;
    fn forward(&self, z: &Latent) -> Result<Image>;
    /// `Jᵀ · cotangent` where `J = ∂forward/∂z`.
    fn vjp(&self, z: &Latent, cotangent: &Image) -> Result<Latent>;
    fn fingerprint(&self) -> Fingerprint;
}

/// A map from images to a realism probability in `(0, 1)`.
pub trait Discriminator: Send + Sync {
    fn input_shape(&self) -> Shape;
    fn forward(&self, image: &Image) -> Result<f64>;
    /// Image-shaped gradient of `cotangent * forward(image)`.
    fn vjp(&self, image: &Image, cotangent: f64) -> Result<Image>;
}

/// Draws `z ~ U[-1, 1]^dim`.
pub fn sample_latent(rng: &mut impl Rng, dim: usize) -> Latent {
    Latent::new((0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect())
        .expect("uniform draws are finite")
}

/// JSON descriptor accepted wherever a generator is expected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeneratorDescriptor {
    Blob(BlobGeneratorSpec),
    Mlp(MlpManifest),
}

/// JSON descriptor accepted wherever a discriminator is expected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DiscriminatorDescriptor {
    Mlp(MlpManifest),
    /// Seeded untrained network with one hidden layer.
    RandomMlp {
        image_shape: [usize; 3],
        hidden: usize,
        seed: u64,
    },
}

impl DiscriminatorDescriptor {
    pub fn build(&self, json_path: Option<&Path>) -> Result<MlpDiscriminator> {
        match self {
            DiscriminatorDescriptor::Mlp(manifest) => {
                if manifest.role != Role::Discriminator {
                    return Err(Error::Format(
                        "manifest does not describe a discriminator".into(),
                    ));
                }
                let path = json_path.ok_or_else(|| {
                    Error::Config("mlp discriminator descriptor needs a file location".into())
                })?;
                MlpDiscriminator::new(mlp::load_mlp(path, manifest)?, manifest.shape())
            }
            DiscriminatorDescriptor::RandomMlp {
                image_shape,
                hidden,
                seed,
            } => {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
                let shape = Shape::new(image_shape[0], image_shape[1], image_shape[2]);
                MlpDiscriminator::random(shape, *hidden, &mut rng)
            }
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads a generator from a descriptor file (`"kind": "blob"` or `"mlp"`).
pub fn load_generator(path: &Path) -> Result<Box<dyn Generator>> {
    match read_json::<GeneratorDescriptor>(path)? {
        GeneratorDescriptor::Blob(spec) => Ok(Box::new(BlobGenerator::new(spec)?)),
        GeneratorDescriptor::Mlp(manifest) => {
            if manifest.role != Role::Generator {
                return Err(Error::Format(format!(
                    "{} does not describe a generator",
                    path.display()
                )));
            }
            let net = mlp::load_mlp(path, &manifest)?;
            Ok(Box::new(MlpGenerator::new(net, manifest.shape())?))
        }
    }
}

/// Loads a discriminator from a descriptor file (`"kind": "mlp"` or
/// `"random-mlp"`).
pub fn load_discriminator(path: &Path) -> Result<Box<dyn Discriminator>> {
    let desc = read_json::<DiscriminatorDescriptor>(path)?;
    Ok(Box::new(desc.build(Some(path))?))
}
