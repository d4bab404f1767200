//! Backend for chunked long-sequence point-map reconstruction.
//!
//! Overlapping chunks of per-frame point maps are aligned pairwise with a
//! confidence-weighted IRLS/Umeyama solver, loop closures are detected from
//! global frame descriptors, and all chunk transforms are refined jointly by a
//! Levenberg–Marquardt pose-graph optimizer over Sim(3).

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod chunk;
pub mod error;
pub mod graph;
pub mod loops;
pub mod metrics;
pub mod pipeline;
pub mod ply;
pub mod sim;
pub mod sim3;
pub mod trajectory;

pub use error::{Error, Result};
pub use sim3::{Sim3, Sim3Tangent, Vec3};
