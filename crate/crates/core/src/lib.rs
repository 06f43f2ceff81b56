//! Multi-field, full frame-rate video deinterlacing.
//!
//! Five consecutive fields are encoded by a shared feature extractor, the four
//! supporting fields are aligned to the reference with chains of deformable
//! residual blocks, a self-attention branch runs in parallel on the reference,
//! and one of two reconstruction branches (selected by the reference parity)
//! estimates the missing field. The estimate is woven with the reference to
//! produce one progressive frame per input field.

pub mod align;
pub mod attention;
pub mod autograd;
pub mod baseline;
pub mod bench;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod field;
pub mod gradcheck;
pub mod layers;
mod kernels;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod ppm;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
