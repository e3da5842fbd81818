//! Self-supervised video representation learning by frame-order correction
//! and affine-transform prediction, with downstream transfer harnesses.

pub mod clip;
pub mod config;
pub mod dataio;
pub mod error;
pub mod evalmetrics;
pub mod experiment;
pub mod geometry;
pub mod nn;
pub mod permspace;
pub mod pretrain;
pub mod selfcheck;
pub mod transfer;

pub use clip::VideoClip;
pub use error::{Error, Result};
