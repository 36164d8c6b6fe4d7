//! Data-free neural generation of 1-D stochastic fields with turbulent
//! velocity statistics.
//!
//! A fully convolutional U-net maps Gaussian white noise to velocity
//! increments; the cumulative sum is the generated field. Training only
//! matches prescribed curves of the second-order structure function,
//! skewness and flatness across scales, plus Gaussianity of the field.

pub mod analysis;
mod binio;
pub mod cli;
pub mod diffcore;
pub mod error;
pub mod fieldgen;
pub mod mstats;
pub mod refcurves;
pub mod trainer;
pub mod unet;
pub mod validation;

pub use error::{Error, Result};
