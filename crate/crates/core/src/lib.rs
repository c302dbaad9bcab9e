//! GAN-inversion inpainting for still images and frame sequences.
//!
//! Damaged pixels are filled by searching the latent space of a pretrained
//! generator for a code whose output matches the known pixels and looks
//! realistic to a discriminator, then compositing the generated pixels into
//! the hole. Sequences can reuse latent solutions between frames and refine
//! windows of frames jointly for temporal consistency.

pub mod bench;
pub mod error;
pub mod exec;
pub mod generators;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod pool;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
pub use generators::{Discriminator, Fingerprint, Generator};
pub use losses::LossWeights;
pub use optim::{OptimConfig, Trajectory};
pub use pipeline::{inpaint_image, inpaint_sequence, InpaintConfig, InpaintResult, SequenceMode};
pub use pool::Pool;
pub use tensor::{Image, Latent, Mask, Shape};
