//! JetFormer at desk scale: a normalizing flow over image patches trained
//! jointly with an autoregressive transformer that models the flow's soft
//! tokens with a Gaussian mixture and text with a byte vocabulary.
//!
//! Runnable examples, one per capability:
//!
//! - `flow_roundtrip`: coupling flow forward, inverse, and log-determinant
//! - `gmm_cfg`: mixture densities and classifier-free guided sampling
//! - `noise_curriculum`: the RGB noise schedule over training
//! - `pca_factoring`: PCA basis for the pre-flow linear map
//! - `train_class_conditional`: train, score, and sample a class model
//! - `text_image_pairs`: joint text-to-image and image-to-text training
//! - `latent_resampling`: redraw Gaussian latents of a real image
//! - `checkpoint_resume`: save mid-run, reload, and finish identically

pub mod backbone;
pub mod check;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod curriculum;
pub mod data;
pub mod engine;
pub mod error;
pub mod factoring;
pub mod flow;
pub mod gmm;
pub mod nn;
pub mod optim;
pub mod rng;

pub use error::{Error, Result};
