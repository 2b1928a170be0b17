//! Visual self-localization toolkit: absolute poses from a miniature
//! structure-from-motion reconstruction, relative poses regressed from
//! Lucas-Kanade optical flow, and fusion of both streams by pose-graph
//! optimization or small recurrent networks, all exercised against a
//! procedural simulator with known ground truth.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod flow;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod cells;
pub mod par;
pub mod pgo;
pub mod rpr;
pub mod sfm;
pub mod sim;

pub use error::{Error, Result};
