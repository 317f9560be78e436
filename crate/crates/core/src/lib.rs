//! Desk-scale latent text-to-image diffusion with lightweight condition
//! adapters.
//!
//! A frozen UNet noise predictor ([`denoiser`]) is steered by small adapter
//! networks ([`adapter`]) whose multi-scale features are added to the UNet
//! encoder. [`conditions`] renders a procedural shapes dataset with exact
//! condition maps, [`training`] fits the base model and the adapters,
//! [`diffusion`] holds the schedule and DDIM sampler, and [`evalkit`] runs
//! the fidelity metrics and ablations.

pub mod adapter;
pub mod checkpoint;
pub mod codec;
pub mod conditions;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod graph;
pub mod imageio;
pub mod nn;
pub mod prior;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
