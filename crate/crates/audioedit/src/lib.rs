//! Latent-space audio editing at desk scale: DDIM inversion, null-text
//! optimization, EOT-suppression via singular-value regularization, and
//! attention-loss prompt refinement, driven by a small trainable
//! conditional denoiser and verified on a synthetic event benchmark.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod nulltext;
pub mod pipeline;
pub mod promptedit;
pub mod synthbench;
pub mod tensor;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
