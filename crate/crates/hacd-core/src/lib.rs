//! Hyperspectral anomalous change detection toolkit.
//!
//! Detects small, rare changes between two co-registered hyperspectral
//! acquisitions while suppressing pervasive radiometric differences.
//! The crate bundles:
//!
//! - ENVI cube I/O, radiometric alignment, and patch extraction ([`cube`], [`envi`], [`maps`])
//! - reproducible synthetic bi-temporal scenes with ground truth ([`scene`])
//! - a minimal reverse-mode differentiation engine over dense tensors ([`autodiff`])
//! - a siamese spatial-spectral comparison network trained with a
//!   stop-gradient cosine loss ([`mtcnet`])
//! - six classical second-order-statistics detectors ([`classical`])
//! - ROC/AUC evaluation ([`eval`])

pub mod autodiff;
pub mod classical;
pub mod cube;
pub mod envi;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod maps;
pub mod mtcnet;
pub mod rng;
pub mod scene;

pub use cube::{extract_patches, radiometric_align, HsiCube, PatchGrid};
pub use error::{Error, Result};
pub use maps::{ChangeMask, ScoreMap};
