//! Boundary and position information mining (BPIM) small-object detector.
//!
//! The crate provides the five fusion blocks (BIG, AWF, PIG, CSF, TFF)
//! assembled into a P2-P5 anchor detector, CIoU-based training, a COCO-style
//! mAP evaluator, dataset tooling and an ablation harness. All numeric code
//! is generic over [`Scalar`]; train at `f32`, verify gradients at `f64`.

pub mod ablate;
pub mod attention;
pub mod autograd;
pub mod ckpt;
pub mod data;
pub mod error;
pub mod eval;
pub mod boundary;
pub mod fusion;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod scale_fusion;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default training/inference precision.
pub type F = f32;
/// Verification precision for finite-difference checks.
pub type V = f64;
