//! Reconstruction/alignment trade-offs for domain generalization.
//!
//! Two halves share this crate. The finite half ([`prob`], [`repmap`],
//! [`frontier`]) computes mutual information, domain discrepancy and
//! reconstruction loss exactly on small discrete domains and enumerates
//! encoders to trace the reconstruction-alignment frontier. The neural half
//! ([`nn`], [`losses`], [`datagen`], [`trainer`]) trains small MLP
//! encoder/classifier/decoder stacks on synthetic spurious-correlation
//! environments under `risk + α·discrepancy + β·reconstruction`.

pub mod error;
pub mod prob;
pub mod repmap;
pub mod frontier;
pub mod instance;
pub mod seeding;
pub mod nn;
pub mod losses;
pub mod datagen;
pub mod trainer;

pub use error::{Error, Result};
