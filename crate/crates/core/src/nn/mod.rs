//! Minimal CPU neural-network engine: `f32` NCHW tensors, a recording tape
//! with hand-written backward passes, and Adam.

mod adam;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use adam::Adam;
pub use graph::{apply_bn_updates, BnRef, BnUpdate, Graph, LeafGrads, NodeId, BN_EPS, BN_MOMENTUM};
pub use params::{Init, Param, ParamId, ParamStore};
pub use tensor::Tensor;
