//! Cross-domain object composition at desk scale.
//!
//! A four-stream diffusion transformer (text, image, style, reference)
//! trained with rectified flow under a three-stage adapter protocol, with a
//! structural attention mask keeping the identity and style conditions from
//! contaminating each other. Ships with a procedural dataset generator, the
//! two-stage curation filters with threshold calibration, and an evaluation
//! bench, all wired together by the `maskcomp` CLI.

pub mod checkpoint;
pub mod compose;
pub mod config;
pub mod curate;
pub mod data;
pub mod eval;
pub mod flow;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use scalar::{DType, Scalar};
pub use tape::{Tape, ValueId};
pub use tensor::{Tensor, TensorError};
