//! Occluded person re-identification with occluder augmentation, a
//! three-stream transformer and a feature completion decoder, built on a
//! small tape autodiff.

pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fcd;
pub mod losses;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod oia;
pub mod oil;
pub mod streams;
pub mod trainer;

pub use error::{Error, Result};
