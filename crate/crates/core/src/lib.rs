//! Goal-oriented Bayesian boundary detection for parallel-beam X-ray CT.
//!
//! The crate is organised along the processing chain:
//!
//! * [`randfield`] draws Whittle-Matérn Gaussian fields, either as a periodic
//!   1D Karhunen-Loève series (inclusion boundaries) or on a 2D periodic grid
//!   via spectral synthesis (level-set fields and noisy backgrounds).
//! * [`priors`] pushes those fields forward to attenuation images: level-set,
//!   log-Gaussian and star-shaped maps, plus random phantom generation.
//! * [`forward`] is the parallel-beam Radon operator (grid and functional
//!   forms), noise injection and SNR bookkeeping.
//! * [`inference`] holds the negative log-likelihood and the MCMC kernels
//!   (pCN, random-walk Metropolis for centers, Metropolis-within-Gibbs).
//! * [`pipeline`] runs the two stages: localisation from a level-set posterior,
//!   then per-inclusion star-shaped posteriors summarised by HPD bands.
//! * [`diagnostics`] provides ACF, ESS, 1D HPD sets and multi-chain checks.

pub mod diagnostics;
mod error;
pub mod forward;
pub mod geometry;
pub mod inference;
pub mod pipeline;
pub mod priors;
pub mod randfield;
pub mod rng;

pub use error::{Error, Result};
pub use geometry::{Point2, Rect};
