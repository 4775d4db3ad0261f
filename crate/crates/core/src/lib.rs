//! Multi-criteria character segmentation.
//!
//! A transformer encoder reads normalized characters, per-domain private
//! projections and one shared projection specialize its features, and a
//! linear-chain CRF over `B/M/E/S` labels turns emission scores into word
//! boundaries. A trained model can be truncated into a shallower student,
//! distilled on normalized emission logits, and run with binary16 kernels.

pub mod corpus;
pub mod crf;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod projection;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
