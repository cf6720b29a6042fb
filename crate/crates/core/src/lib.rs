//! Diffusion-encoder autoencoder at desk scale.
//!
//! A denoising diffusion model acts as the encoder of a latent-variable
//! autoencoder. Training alternates between a short Langevin chain that
//! equilibrates latents to the decoder-tilted posterior (E-step) and
//! separate encoder/decoder gradient updates. The crate also ships a
//! Gaussian-encoder VAE baseline, an exact quadrature oracle for the
//! one-dimensional toy generative process, and a rate-distortion sweep
//! harness with CSV/SVG outputs.

pub(crate) mod layers;
pub mod decoder;
pub mod harness;
pub mod encoder;
pub mod schedule;
pub mod toy;
pub mod trainer;
pub mod tensor;
pub mod util;

pub use schedule::VpSchedule;
pub use tensor::{Tape, Tensor, TensorError, TensorRef};
