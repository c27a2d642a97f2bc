//! Weakly-supervised wetland segmentation of satellite image time series
//! from sparse point labels.
//!
//! The crate is organised bottom-up: a small reverse-mode tensor engine
//! ([`tensor`], [`tape`], [`ops`]), the data model and file formats
//! ([`data`]), synthetic scenes ([`synth`]), the network ([`nn`]), the
//! region-growing pseudo-label engine ([`grow`]), losses and metrics
//! ([`losses`], [`metrics`]) and the training loop ([`train`]).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod grow;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
