//! From-scratch decoder-only Transformer with manual backpropagation.
//!
//! The engine instruments two counters while it trains — FLOPs charged
//! through the shared [`crate::flops`] vocabulary and bytes of
//! activations retained for the backward pass — which serve as the
//! execution oracle for the analytic cost model.

pub mod checkpoint;
pub mod gradcheck;
pub mod lora;
pub mod model;
pub mod optim;
pub mod subset;
pub mod svd;

pub use model::{Batch, Counters, Model, ModelDims, ParamStore, StepResult, Variant};
pub use optim::{cosine_lr, AdamW, OptimizerSpec};
