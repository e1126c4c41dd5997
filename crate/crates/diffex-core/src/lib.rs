//! DiffEx: explain a frozen image classifier with a classifier-aware
//! diffusion autoencoder.
//!
//! The pipeline has five stages: generate a two-class synthetic microscopy
//! dataset with known generative factors, train and freeze a small
//! convolutional classifier, train a diffusion autoencoder conditioned on a
//! semantic code that concatenates an encoder embedding with the classifier's
//! probabilities, discover latent directions in that code space with a
//! contrastive objective, then greedily rank the directions by how much they
//! move the classifier and render counterfactual image grids along the
//! winners.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod datagen;
pub mod denoiser;
pub mod diffusion;
pub mod directions;
pub mod error;
pub mod explain;
pub mod imageio;
pub mod nn;
pub mod pipeline;
pub mod ranking;
pub mod rng;
pub mod semantic_ae;

pub use error::{Error, Result};
