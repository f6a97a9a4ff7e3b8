//! Factor-analysis front-end for speech segments.
//!
//! Each segment is modelled by a GMM whose component means are shifted along a
//! shared low-rank subspace by a per-segment latent vector (the "i-vector").
//! The crate provides:
//!
//! * closed-form Gaussian posteriors for the latent vector under a mean-field
//!   factorisation, together with the variational lower bound ([`posterior`]),
//! * EM-style extractor training driven either by model-internal alignment or
//!   by externally supplied per-frame component posteriors ([`trainer`]),
//! * calibration of external posteriors by direct numerical maximisation of
//!   the same lower bound ([`calibration`]),
//! * seeded synthetic data generation and plain-GMM baseline training
//!   ([`model`], [`gmm`]),
//! * binary/text file formats for features, posteriors, models and extracted
//!   i-vectors ([`io`]).
//!
//! All accumulation is in `f64`. Randomness is confined to explicitly seeded
//! generators, so equal seeds give equal results on any platform.

pub mod calibration;
pub mod error;
pub mod gmm;
pub mod io;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod posterior;
pub mod reduce;
pub mod stats;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
