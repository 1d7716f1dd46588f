//! Focus-constrained conditional VAE for diverse response generation.
//!
//! A latent variable is turned into a focus distribution over post words,
//! the decoder attends to focus-augmented post states while tracking a
//! coverage vector, and a focus constraint pulls the length-normalized
//! coverage toward the focus. Everything runs on the small reverse-mode
//! engine in [`autodiff`].

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod focus;
pub mod micro;
pub mod model;
pub mod training;

pub use config::{TrainConfig, Variant};
pub use error::{Error, Result};
pub use model::FocusCvae;
