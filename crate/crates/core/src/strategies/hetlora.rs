//! Heterogeneous low-rank adapters: the server holds rank-Z adapter
//! pairs next to the frozen pretrained matrices; a client assigned rank
//! z ≤ Z receives and trains the nested slice made of the first z
//! down-projection columns and up-projection rows, plus all norms and
//! the head. Aggregation averages each adapter coordinate over the
//! clients whose slice covers it (norm and head tensors are covered by
//! everyone), with the same participation-weighted rule as every other
//! strategy.

use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchitectureDescriptor, DeviceConstraint};
use crate::cost::{lora_cost, TrainingShape};
use crate::error::{Error, Result};
use crate::nn::lora::{is_lora_down, is_lora_up, rank_slice_map, slice_rank};
use crate::nn::{Model, ModelDims, ParamStore, Variant};

use super::{
    check_round_and_clients, coverage_merge, run_local_steps, trained_payload,
    whole_tensor_contribution, AggregationState, BatchSource, ClientUpdate, Contribution,
    LocalOutcome, LocalSetup, Payload, TensorContribution,
};

/// Builds the server store: the pretrained weights plus fresh rank-Z
/// adapter pairs (seeded Gaussian down-projections, zero
/// up-projections, so adapters start as identity deltas).
pub fn hetlora_server_init(
    pretrained: &ParamStore<f32>,
    arch: &ArchitectureDescriptor,
    max_rank: usize,
    seed: u64,
) -> Result<ParamStore<f32>> {
    let dims = ModelDims::from_arch(arch);
    let shell = Model::<f32>::init(dims, Variant::Lora { rank: max_rank }, vec![arch.layers], seed)?;
    let mut store = shell.params;
    for (name, tensor) in pretrained.iter() {
        store.insert(name.clone(), tensor.clone());
    }
    Ok(store)
}

/// Largest adapter rank whose predicted cost fits the device, up to
/// `cap` (the server's rank). `None` means the device must skip.
pub fn max_feasible_adapter_rank(
    arch: &ArchitectureDescriptor,
    constraint: &DeviceConstraint,
    shape: &TrainingShape,
    cap: usize,
) -> Option<usize> {
    (1..=cap.min(arch.embed_dim))
        .rev()
        .find(|&z| lora_cost(arch, z, shape).is_ok_and(|c| c.resource.fits(constraint)))
}

/// Trains the rank-`rank` adapter slice, all norms, and the head; main
/// matrices and embeddings stay frozen.
pub fn local_train_hetlora(
    global: &ParamStore<f32>,
    arch: &ArchitectureDescriptor,
    rank: usize,
    setup: &LocalSetup,
    batches: &mut BatchSource,
    rng: &mut ChaCha8Rng,
) -> Result<LocalOutcome> {
    let dims = ModelDims::from_arch(arch);
    let mut model = Model::empty(dims, Variant::Lora { rank }, vec![arch.layers])?;
    model.params = slice_rank(global, rank)?;
    let stats = run_local_steps(&mut model, setup, batches, rng)?;
    let payload = Payload::RankSlices {
        rank,
        tensors: trained_payload(&model)?,
    };
    Ok(LocalOutcome {
        update: ClientUpdate::new(setup.client, setup.round, payload),
        stats,
    })
}

/// Merges adapter slices by nested-rank coverage and norm/head tensors
/// by full coverage.
pub fn aggregate_hetlora(
    state: &AggregationState,
    updates: &[ClientUpdate],
    n: usize,
    max_rank: usize,
) -> Result<ParamStore<f32>> {
    check_round_and_clients(state, updates, n)?;
    let mut contributions = Vec::with_capacity(updates.len());
    for update in updates {
        let Payload::RankSlices { rank, tensors } = &update.payload else {
            return Err(Error::config(format!(
                "client {} sent a payload kind this aggregator does not accept",
                update.client
            )));
        };
        if *rank > max_rank {
            return Err(Error::config(format!(
                "client {} trained rank {} above the server rank {max_rank}",
                update.client, rank
            )));
        }
        let mut per_tensor = std::collections::BTreeMap::new();
        for (name, tensor) in tensors.iter() {
            if is_lora_down(name) || is_lora_up(name) {
                let target = state.global.try_get(name).ok_or_else(|| {
                    Error::shape(format!("update names unknown global tensor {name}"))
                })?;
                let coords = rank_slice_map(name, target.shape(), *rank)?;
                if coords.len() != tensor.len() {
                    return Err(Error::shape(format!(
                        "adapter slice {name} has {} scalars, rank {} covers {}",
                        tensor.len(),
                        rank,
                        coords.len()
                    )));
                }
                per_tensor.insert(
                    name.clone(),
                    TensorContribution {
                        coords,
                        values: tensor.data(),
                    },
                );
            } else {
                let (key, tc) = whole_tensor_contribution(name, tensor, &state.global)?;
                per_tensor.insert(key, tc);
            }
        }
        contributions.push(Contribution {
            client: update.client,
            tensors: per_tensor,
        });
    }
    coverage_merge(&state.global, &contributions, n)
}
