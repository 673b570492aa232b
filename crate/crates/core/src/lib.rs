//! Portable DNN inference built on one abstract stencil layer.
//!
//! Every supported layer (convolution, depthwise and group convolution,
//! pooling, activations, fully connected, residual add, batch-norm affine,
//! nearest upsampling) is described by the same seven window parameters
//! and executed by a single loop-nest driver ([`driver::run_layer`]).
//! The only per-layer code is a small register-tile kernel with
//! LOAD / COMPUTE / STORE phases, and every activation lives in one
//! channel-blocked layout so layers never repack each other's outputs.
//!
//! The float engine is generic over [`Scalar`] (`f32` or `f64`); the
//! `uint8` path reuses the same driver and kernels with `i32`
//! accumulators. Concrete `f32` aliases are exported at the root.

pub mod arith;
pub mod driver;
pub mod error;
pub mod instrument;
pub mod kernels;
pub mod layer;
pub mod layers;
pub mod layout;
pub mod model;
pub mod oracle;
pub mod quantized;
pub mod scalar;
pub mod verify;

pub use driver::{run_layer, run_layer_in_place, Operand};
pub use error::{Error, Result};
pub use kernels::{KernelConfig, KernelImpl, KernelVariant};
pub use layer::{classify, output_shape, BinaryMode, LayerClass, LayerParams, MaxFloor, ReductionOp};
pub use layers::{LayerKind, LayerSpec, Padding};
pub use layout::{BlockedTensor, PackedWeights, PlainTensor, DEFAULT_BLOCK};
pub use model::{memory_report, DType, FloatModel, MemoryReport, ModelPlan, QuantizedModel};
pub use quantized::QuantParams;
pub use scalar::Scalar;

/// `f32` plain activation tensor.
pub type Tensor = PlainTensor<f32>;
/// `f32` channel-blocked activation tensor.
pub type Blocked = BlockedTensor<f32>;
/// `f32` co-tiled weights.
pub type Weights = PackedWeights<f32>;
/// `f32` model with packed weights.
pub type Model = FloatModel<f32>;
/// `uint8` activation tensor.
pub type QTensor = PlainTensor<u8>;
/// `uint8` channel-blocked activation tensor.
pub type QBlocked = BlockedTensor<u8>;
