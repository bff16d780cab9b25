//! Framework-free colon-polyp segmentation network on a tape-based
//! reverse-mode autodiff engine.
//!
//! The crate is organized around a pyramid transformer encoder producing
//! four feature maps, a global-local interaction block (GLIM) over the
//! three high-level maps, a selective aggregation block (SAM) blending the
//! shallowest and deepest maps, two segmentation heads, and a weighted
//! BCE + IoU training loss. Everything runs on dense NCHW tensors; f32 for
//! training, f64 for gradient checking.

pub mod encoder;
pub mod error;
pub mod glim;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod sam;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod shape;

pub use error::{Error, Result};
pub use graph::{Graph, Tensor, TensorId};
pub use ops::ConvParams;
pub use params::{AdamW, Init, ParamBinding, ParamId, ParamStore};
pub use scalar::Scalar;
pub use shape::Shape;
