//! Desk-scale multimodal latent alignment: a multi-gate top-K
//! mixture-of-experts predictor trained by alternating gradient descent
//! under a combined contrastive + regularization energy, on synthetic
//! paired-modality data with a known shared latent.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod moe;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
