//! Simulator and library for resource-constrained cross-device federated
//! finetuning of pretrained tiny Transformers.
//!
//! The crate is organized around a small set of subsystems:
//!
//! - [`arch`]: architecture descriptors, training configurations, and
//!   device constraint scenarios.
//! - [`flops`] / [`cost`]: the analytic resource cost model (peak training
//!   memory, upload bytes, training FLOPs) for layer finetuning, LoRA,
//!   width-subset, and low-rank factorization schemes.
//! - [`selection`]: server-side feasibility filtering and architecture
//!   selection that maximizes the average number of trained layers.
//! - [`tensor`] / [`nn`]: a from-scratch tensor engine and decoder-only
//!   Transformer with manual backpropagation, AdamW, layer freezing, LoRA
//!   adapters, SVD factorization, width subsetting, and early exits. The
//!   engine carries FLOP and retained-activation counters that serve as
//!   the oracle for the analytic cost model.
//! - [`strategies`]: client-side local training and server-side
//!   aggregation for layer finetuning and the baselines (heterogeneous
//!   LoRA, FedHM, HeteroFL, FjORD, FedRolex, DepthFL-lite).
//! - [`fedsim`]: the round-based orchestrator (sampling, broadcast,
//!   local training, aggregation, evaluation, metrics).
//! - [`data`]: corpus ingestion, character tokenization, client
//!   partitioning, and a synthetic classification task.

pub mod arch;
pub mod cost;
pub mod data;
pub mod error;
pub mod fedsim;
pub mod flops;
pub mod nn;
pub mod rng;
pub mod selection;
pub mod strategies;
pub mod tensor;

pub use arch::{ArchitectureDescriptor, ConstraintScenario, DeviceConstraint, TrainingConfiguration};
pub use cost::{MemoryBreakdown, ResourceCost, TrainingShape};
pub use error::{Error, Result};
