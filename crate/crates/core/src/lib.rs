//! Dual-branch 3D visual grounding with box-surface relative position
//! encoding and a text-confidence gate on cross-attention.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod attention;
pub mod geometry;
pub mod posenc;
pub mod decoder;
pub mod scenegen;
pub mod textsplit;
pub mod grounding;
pub mod bench;
