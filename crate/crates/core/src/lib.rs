//! Real-time saliency masks for differentiable image classifiers.
//!
//! A masking model looks at an image and a class selector and, in a single
//! forward pass, returns a mask over the pixels that carry the evidence for
//! that class. The crate also provides the black-box classifiers it is
//! trained against, the iterative and box baselines it is compared with, and
//! the evaluation metrics used to compare them.

pub mod baselines;
pub mod blackbox;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod evidence;
pub mod image;
pub mod masker;
pub mod nn;
pub mod objective;
pub mod service;
pub mod trainer;

pub use error::{Error, Result};
