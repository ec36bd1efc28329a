//! Bayesian segmentation with stochastic-gradient Hamiltonian Monte Carlo.
//!
//! The crate trains small segmentation networks as SGHMC chains over a
//! tempered ("cold") posterior and turns the collected weight samples into
//! ensemble predictions, voxel-wise uncertainty, calibration metrics,
//! diversity analyses and image-level failure detection.
//!
//! Layout:
//!
//! - [`tensor`]: dense tensors and a define-then-run reverse-mode autodiff graph
//! - [`model`]: mini U-Net / MLP builders and flat weight vectors
//! - [`energy`]: Dice + cross-entropy losses, Gaussian prior, mini-batch gradients
//! - [`sampler`]: cyclical learning-rate schedule, SGHMC update, chain driver
//! - [`oracle`]: analytic targets with closed-form stationary laws
//! - [`inference`]: Monte-Carlo marginalisation, MC-Dropout, entropy maps
//! - [`metrics`]: Dice, ASSD, ECE, Brier, NLL
//! - [`diversity`]: cosine similarity, explored volume, functional distance, loss planes
//! - [`failure`]: TF/FF/FB maps, confidence score, ROC/AUC
//! - [`synth`]: synthetic cardiac-like scenes, domain shift and augmentation
//! - [`protocol`]: named experiment recipes and temperature sweeps

pub mod diversity;
pub mod energy;
pub mod error;
pub mod failure;
pub mod inference;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod protocol;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
