//! Joint knee-structure segmentation and self-supervised stereo depth.
//!
//! The crate holds the whole pipeline: image grids and the differentiable
//! warping and SSIM operators ([`geometry`]), the loss terms with analytic
//! gradients ([`losses`]), a small tape autograd ([`nn`]) and the nested
//! encoder-decoder built on it ([`model`]), dataset handling and
//! augmentation ([`data`]), a synthetic stereo generator with ground truth
//! ([`synthgen`]), training ([`pipeline`]) and evaluation ([`eval`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod grid;
pub mod losses;
pub mod model;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod synthgen;

pub use error::{Error, Result};
