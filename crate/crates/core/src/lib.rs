//! Photometric stereo with a dual-branch set-attention network.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`diffarray`]),
//! the attention blocks and network ([`attention`], [`model`]), the training
//! objective, a least-squares Lambertian solver ([`classic`]), a synthetic
//! data generator ([`synthdata`]), the training loop ([`trainer`]) and the
//! `pst` command line ([`cli`]).

pub mod attention;
pub mod classic;
pub mod cli;
pub mod diffarray;
pub mod error;
pub mod gradsuite;
pub mod model;
pub mod objective;
pub mod params;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, ParseError, Result};
