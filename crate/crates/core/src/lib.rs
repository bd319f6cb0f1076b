//! Reversible image-to-image translation networks on a from-scratch
//! reverse-mode autodiff engine.
//!
//! The core pieces are a dense [`Tensor`], a Wengert [`Tape`] with explicit
//! activation retention, additive-coupling blocks whose backward pass
//! rebuilds activations from outputs, and the generator/discriminator
//! models, objectives, optimizer and metrics built on top.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the precision.

pub mod autodiff;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generators;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod losses;
pub mod model;
pub mod profile;
pub mod reversible;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, OpKind, ParamId, ParamStore, Parameter, RetentionPolicy, Tape, Var};
pub use error::{Error, Result};
pub use kernels::PaddingSpec;
pub use reversible::{
    coupling_forward, coupling_inverse, gradient_discrepancy, sequence_backward_recompute, sequence_forward, zero_init,
    CouplingBlock, Diagnostics, Direction, RetentionMode, ReversibleSequence, SubNet,
};
pub use scalar::{DType, Scalar};
pub use tensor::{AnyTensor, Tensor};
pub use train::{fit, lr_schedule, train_step, Adam, DatasetSpec, TrainConfig, Trainer};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
