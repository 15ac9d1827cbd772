//! Dense `f32` tensors and reverse-mode differentiation.

mod gemm;
mod gradcheck;
mod graph;
mod ops;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_subset, GradCheckReport, ParamCheck};
pub use graph::{AttnSegment, Graph, SegmentMask, Var};
pub use ops::{layer_norm, masked_softmax_rows, sinusoidal_positions, Mask, LAYER_NORM_EPS};
pub use params::{Gradients, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::sigmoid;
