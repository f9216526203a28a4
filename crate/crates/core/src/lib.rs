//! Loss laboratory for hypersphere face embeddings.
//!
//! * [`geometry`]: normalization, cosine kernels, clamped arccos, log-sum-exp
//! * [`losses`]: softmax, normalized softmax, CosFace, ArcFace, N-pair,
//!   SN-pair, MixFace, and the unified scale factor
//! * [`gradients`]: analytic backward passes and a finite-difference oracle
//! * [`synth`]: synthetic identities under controlled capture conditions
//! * [`trainer`]: a small encoder trained with SGD under any loss
//! * [`evaluator`]: best-threshold verification, ROC, train/test heatmaps

pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod gradients;
pub mod losses;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
