//! Graph neural networks, the skeleton VAE, the latent diffusion denoiser and
//! preference finetuning, on a small reverse-mode autodiff tape.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod experiments;
pub mod gnn;
pub mod gradcheck;
pub mod params;
pub mod pipeline;
pub mod preference;
pub mod skdit;
pub mod skvae;
pub mod toy;

pub use autodiff::{Tape, Tensor, Var};
pub use checkpoint::Checkpoint;
pub use error::ModelError;
pub use params::{AdamConfig, AdamW, ParamSet};
