//! Camera-aware unsupervised domain adaptation for video person
//! re-identification at desk scale: a small reverse-mode autodiff core, a
//! tracklet encoder with identity and adversarial camera heads, self-paced
//! contrastive learning over a clustered memory bank, a synthetic
//! multi-camera benchmark, and retrieval metrics.

pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod exec;
pub mod losses;
pub mod membank;
pub mod model;
pub mod pseudo;
pub mod selfpaced;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use exec::Exec;
