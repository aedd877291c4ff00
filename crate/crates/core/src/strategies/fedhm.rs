//! Low-rank factorization with server-side reconstruction: the server
//! factorizes each block linear into a rank-z pair per distinct client
//! rank, clients train both factors (plus norms, biases, and the head),
//! and the server multiplies each client's factors back into full
//! matrices before averaging. The least constrained device trains the
//! unfactorized matrices directly, so at least one participant
//! contributes without truncation error.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchitectureDescriptor, DeviceConstraint};
use crate::cost::{lowrank_cost, TrainingShape};
use crate::error::{Error, Result};
use crate::nn::model::BLOCK_LINEARS;
use crate::nn::svd::svd_factorize;
use crate::nn::{Model, ModelDims, ParamStore, Variant};
use crate::tensor::{mm_nn, Tensor};

use super::{
    check_round_and_clients, coverage_merge, run_local_steps, trained_payload,
    whole_tensor_contribution, AggregationState, BatchSource, ClientUpdate, Contribution,
    LocalOutcome, LocalSetup, Payload,
};

/// Replaces every block linear's matrix with a rank-`rank` factor pair
/// (computed by SVD in f64 and stored in f32); biases, norms,
/// embeddings, and the head pass through unchanged.
pub fn fedhm_factorize(
    global: &ParamStore<f32>,
    arch: &ArchitectureDescriptor,
    rank: usize,
) -> Result<ParamStore<f32>> {
    let mut out = global.clone();
    for layer in 0..arch.layers {
        for lin in BLOCK_LINEARS {
            let name = format!("layer{layer}.{lin}.w");
            let w = out
                .remove(&name)
                .ok_or_else(|| Error::shape(format!("global model is missing {name}")))?;
            let w64: Tensor<f64> = w.cast();
            let (f1, f2) = svd_factorize(&w64, rank)?;
            out.insert(format!("layer{layer}.{lin}.f1"), f1.cast::<f32>());
            out.insert(format!("layer{layer}.{lin}.f2"), f2.cast::<f32>());
        }
    }
    Ok(out)
}

/// Factor stores for a round's client ranks, computed once per distinct
/// rank.
pub fn fedhm_factorize_for_ranks(
    global: &ParamStore<f32>,
    arch: &ArchitectureDescriptor,
    ranks: &[usize],
) -> Result<BTreeMap<usize, ParamStore<f32>>> {
    let distinct: BTreeSet<usize> = ranks.iter().copied().collect();
    distinct
        .into_iter()
        .map(|z| Ok((z, fedhm_factorize(global, arch, z)?)))
        .collect()
}

/// Largest factor rank whose predicted cost fits the device, up to
/// `cap`. `None` means not even rank 1 fits.
pub fn max_feasible_factor_rank(
    arch: &ArchitectureDescriptor,
    constraint: &DeviceConstraint,
    shape: &TrainingShape,
    cap: usize,
) -> Option<usize> {
    (1..=cap.min(arch.embed_dim))
        .rev()
        .find(|&z| lowrank_cost(arch, z, shape).is_ok_and(|c| c.resource.fits(constraint)))
}

/// Trains one round. `rank: Some(z)` expects `broadcast` to be the
/// rank-z factor store; `rank: None` is the unfactorized role and
/// expects the plain global store.
pub fn local_train_fedhm(
    broadcast: &ParamStore<f32>,
    arch: &ArchitectureDescriptor,
    rank: Option<usize>,
    setup: &LocalSetup,
    batches: &mut BatchSource,
    rng: &mut ChaCha8Rng,
) -> Result<LocalOutcome> {
    let dims = ModelDims::from_arch(arch);
    let variant = match rank {
        Some(z) => Variant::Factored { rank: z },
        None => Variant::full(),
    };
    let mut model = Model::empty(dims, variant, vec![arch.layers])?;
    model.params = broadcast.clone();
    let stats = run_local_steps(&mut model, setup, batches, rng)?;
    let payload = Payload::Factors {
        rank,
        tensors: trained_payload(&model)?,
    };
    Ok(LocalOutcome {
        update: ClientUpdate::new(setup.client, setup.round, payload),
        stats,
    })
}

/// Multiplies factor pairs back into full matrices; all other tensors
/// pass through.
fn reconstruct(tensors: &ParamStore<f32>) -> Result<ParamStore<f32>> {
    let mut out = ParamStore::new();
    for (name, tensor) in tensors.iter() {
        if let Some(base) = name.strip_suffix(".f1") {
            let f2 = tensors
                .try_get(&format!("{base}.f2"))
                .ok_or_else(|| Error::shape(format!("factor {name} arrived without {base}.f2")))?;
            if tensor.cols() != f2.rows() {
                return Err(Error::shape(format!(
                    "factor pair {base} has incompatible ranks {} and {}",
                    tensor.cols(),
                    f2.rows()
                )));
            }
            out.insert(format!("{base}.w"), mm_nn(tensor, f2));
        } else if name.ends_with(".f2") {
            continue;
        } else {
            out.insert(name.clone(), tensor.clone());
        }
    }
    Ok(out)
}

/// Reconstructs every client's full matrices and merges them (and the
/// whole norm/bias/head tensors) with the participation-weighted rule.
pub fn aggregate_fedhm(
    state: &AggregationState,
    updates: &[ClientUpdate],
    n: usize,
) -> Result<ParamStore<f32>> {
    check_round_and_clients(state, updates, n)?;
    let mut reconstructed = Vec::with_capacity(updates.len());
    for update in updates {
        let Payload::Factors { tensors, .. } = &update.payload else {
            return Err(Error::config(format!(
                "client {} sent a payload kind this aggregator does not accept",
                update.client
            )));
        };
        reconstructed.push((update.client, reconstruct(tensors)?));
    }
    let mut contributions = Vec::with_capacity(reconstructed.len());
    for (client, store) in &reconstructed {
        let mut per_tensor = std::collections::BTreeMap::new();
        for (name, tensor) in store.iter() {
            let (key, tc) = whole_tensor_contribution(name, tensor, &state.global)?;
            per_tensor.insert(key, tc);
        }
        contributions.push(Contribution {
            client: *client,
            tensors: per_tensor,
        });
    }
    coverage_merge(&state.global, &contributions, n)
}
