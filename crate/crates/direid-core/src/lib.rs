//! Degradation-invariant person re-identification at desk scale.
//!
//! The crate trains and evaluates a two-stage pipeline on a procedurally
//! generated pedestrian corpus:
//!
//! * **Stage 1 (DDGAN)** decomposes images into content and degradation
//!   codes with adversarial supervision, alternating a self-degradation
//!   phase (clean image vs. a synthetically degraded copy of itself) with a
//!   cross-degradation phase (two unrelated real images swapping codes).
//! * **Stage 2 (DFEN)** builds the final identity representation by fusing
//!   the degradation-invariant content feature with an attention-weighted
//!   degradation-sensitive embedding, trained under multiple classifiers.
//!
//! Everything runs on `f64` with a small tape-based reverse-mode
//! differentiation engine ([`autodiff`]), which keeps training and
//! finite-difference gradient verification in the same numeric type.
//! All randomness flows through explicitly seeded generators so that runs
//! are reproducible bit for bit.

pub mod autodiff;
pub mod data;
pub mod degrade;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod networks;
pub mod params;
pub mod rng;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
