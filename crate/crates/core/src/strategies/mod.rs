//! Client-side local training and server-side aggregation for layer
//! finetuning and the heterogeneity baselines (nested-rank adapters,
//! reconstructed low-rank factors, static and rolling width subsets,
//! per-batch width switching, and depth scaling with early exits).
//!
//! All aggregation reduces to one primitive: per-coordinate
//! participation-weighted averaging. A coordinate covered by `k` of the
//! `n` round participants becomes
//!
//! ```text
//! new = (1/n)·Σ_covering updates + (1 − k/n)·old
//! ```
//!
//! computed in delta form `old + (1/n)·Σ (update − old)` with f64
//! accumulation in fixed client-id order, so results are independent of
//! arrival order and a round in which every client returns exactly what
//! it received leaves the global model bitwise unchanged. Uncovered
//! coordinates are never touched.

pub mod depthfl;
pub mod fedhm;
pub mod hetlora;
pub mod layerft;
pub mod widthsub;

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::subset::SubsetSpec;
use crate::nn::{AdamW, Batch, Counters, Model, OptimizerSpec, ParamStore};
use crate::tensor::Scalar;

pub use depthfl::{aggregate_depthfl, depthfl_loss, depthfl_server_init, local_train_depthfl};
pub use fedhm::{
    aggregate_fedhm, fedhm_factorize, fedhm_factorize_for_ranks, local_train_fedhm,
    max_feasible_factor_rank,
};
pub use hetlora::{aggregate_hetlora, hetlora_server_init, local_train_hetlora, max_feasible_adapter_rank};
pub use layerft::{aggregate_layerft, local_train_layerft};
pub use widthsub::{
    aggregate_subset, fedrolex_index_set, fedrolex_subset, fjord_feasible_levels,
    fjord_sample_level, heterofl_index_set, heterofl_subset, local_train_fjord,
    local_train_subset, max_feasible_width_level,
};

/// Bytes per uploaded scalar (single-precision payloads).
pub const UPLOAD_SCALAR_BYTES: u64 = 4;

/// What one client sends back after local training. Payloads carry only
/// trained tensors — frozen parameters never travel.
#[derive(Clone, Debug)]
pub enum Payload {
    /// Whole tensors that map one-to-one onto global tensors.
    Tensors(ParamStore<f32>),
    /// Adapter slices at the client's rank (down-projection columns,
    /// up-projection rows) plus whole norm/head tensors.
    RankSlices { rank: usize, tensors: ParamStore<f32> },
    /// Width-subset tensors with the index sets that place them.
    Subset { spec: SubsetSpec, tensors: ParamStore<f32> },
    /// Factor pairs per block linear (`rank: None` means the client
    /// trained the unfactorized matrices).
    Factors {
        rank: Option<usize>,
        tensors: ParamStore<f32>,
    },
}

impl Payload {
    pub fn tensors(&self) -> &ParamStore<f32> {
        match self {
            Payload::Tensors(t) => t,
            Payload::RankSlices { tensors, .. } => tensors,
            Payload::Subset { tensors, .. } => tensors,
            Payload::Factors { tensors, .. } => tensors,
        }
    }

    pub fn scalar_count(&self) -> u64 {
        self.tensors().total_scalars()
    }
}

/// One client's round result.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client: usize,
    pub round: usize,
    pub payload: Payload,
    /// Serialized payload size; by construction 4 bytes per trained
    /// scalar, which is exactly what the cost model predicts as upload.
    pub upload_bytes: u64,
}

impl ClientUpdate {
    pub fn new(client: usize, round: usize, payload: Payload) -> Self {
        let upload_bytes = UPLOAD_SCALAR_BYTES * payload.scalar_count();
        ClientUpdate {
            client,
            round,
            payload,
            upload_bytes,
        }
    }
}

/// Server-side aggregation input: the round barrier's global model.
#[derive(Clone, Debug)]
pub struct AggregationState {
    pub round: usize,
    pub global: ParamStore<f32>,
}

impl AggregationState {
    pub fn new(round: usize, global: ParamStore<f32>) -> Self {
        AggregationState { round, global }
    }
}

/// Common local-training knobs for one client round.
#[derive(Clone, Copy, Debug)]
pub struct LocalSetup<'a> {
    pub client: usize,
    pub round: usize,
    /// Mini-batch steps this round.
    pub steps: usize,
    pub lr: f64,
    pub optimizer: &'a OptimizerSpec,
}

/// Mini-batch supplier; drawing uses the client's round stream.
pub type BatchSource<'a> = dyn FnMut(&mut ChaCha8Rng) -> Result<Batch> + 'a;

/// Measured execution footprint of one client round.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LocalStats {
    /// Loss averaged over the round's steps (sum of active-exit
    /// cross-entropies per step).
    pub mean_loss: f64,
    /// Total FLOPs across the round's steps.
    pub flops: u64,
    /// Largest single-step memory footprint: loaded parameters,
    /// gradients + optimizer moments, retained activations, and logit
    /// buffers.
    pub peak_memory_bytes: u64,
}

/// A finished client round: the update to upload plus its footprint.
#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub update: ClientUpdate,
    pub stats: LocalStats,
}

/// Bytes of gradient plus the two optimizer moment tensors per trained
/// scalar.
pub(crate) const GRAD_OPT_BYTES_PER_SCALAR: u64 = 3 * UPLOAD_SCALAR_BYTES;

/// Runs `setup.steps` mini-batch steps with a fresh optimizer, mutating
/// the model's parameters in place. Aborts on a non-finite loss.
pub(crate) fn run_local_steps(
    model: &mut Model<f32>,
    setup: &LocalSetup,
    batches: &mut BatchSource,
    rng: &mut ChaCha8Rng,
) -> Result<LocalStats> {
    if setup.steps == 0 {
        return Err(Error::config("local training needs at least one step"));
    }
    let mut opt = AdamW::new(*setup.optimizer);
    let loaded = model.params.total_scalars();
    let trained = model.trained_scalars();
    let mut stats = LocalStats::default();
    let mut loss_sum = 0.0;
    for _ in 0..setup.steps {
        let batch = batches(rng)?;
        let mut counters = Counters::default();
        let step = model.train_step(&batch, 0.0, rng, &mut counters)?;
        if !step.loss.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite loss on client {} in round {}",
                setup.client, setup.round
            )));
        }
        opt.step(&mut model.params, &step.grads, setup.lr)?;
        loss_sum += step.loss;
        stats.flops += counters.flops;
        let step_mem = UPLOAD_SCALAR_BYTES * loaded
            + GRAD_OPT_BYTES_PER_SCALAR * trained
            + counters.activation_bytes
            + counters.output_bytes;
        stats.peak_memory_bytes = stats.peak_memory_bytes.max(step_mem);
    }
    stats.mean_loss = loss_sum / setup.steps as f64;
    Ok(stats)
}

/// Copies of exactly the model's trained tensors — the upload payload.
pub(crate) fn trained_payload(model: &Model<f32>) -> Result<ParamStore<f32>> {
    let mut out = ParamStore::new();
    for name in model.trained_names() {
        let tensor = model
            .params
            .try_get(&name)
            .ok_or_else(|| Error::shape(format!("trained tensor {name} missing from model")))?;
        out.insert(name, tensor.clone());
    }
    Ok(out)
}

/// One client's aggregation input for one global tensor: the flat
/// coordinates it covers (in its own value order) and the values.
pub(crate) struct TensorContribution<'a> {
    pub coords: Vec<usize>,
    pub values: &'a [f32],
}

/// All of one client's per-tensor contributions.
pub(crate) struct Contribution<'a> {
    pub client: usize,
    pub tensors: BTreeMap<String, TensorContribution<'a>>,
}

/// Identity coverage for a whole tensor that must match the global shape.
pub(crate) fn whole_tensor_contribution<'a>(
    name: &str,
    values: &'a crate::tensor::Tensor<f32>,
    global: &ParamStore<f32>,
) -> Result<(String, TensorContribution<'a>)> {
    let target = global
        .try_get(name)
        .ok_or_else(|| Error::shape(format!("update names unknown global tensor {name}")))?;
    if target.shape() != values.shape() {
        return Err(Error::shape(format!(
            "update tensor {name} has shape {:?}, global has {:?}",
            values.shape(),
            target.shape()
        )));
    }
    Ok((
        name.to_string(),
        TensorContribution {
            coords: (0..values.len()).collect(),
            values: values.data(),
        },
    ))
}

/// Validates shared aggregation preconditions: every update belongs to
/// the state's round, client ids are distinct, and at most `n` updates
/// participate.
pub(crate) fn check_round_and_clients(
    state: &AggregationState,
    updates: &[ClientUpdate],
    n: usize,
) -> Result<()> {
    if updates.len() > n {
        return Err(Error::config(format!(
            "{} updates exceed the {} round participants",
            updates.len(),
            n
        )));
    }
    let mut seen = BTreeSet::new();
    for u in updates {
        if u.round != state.round {
            return Err(Error::config(format!(
                "update from client {} belongs to round {}, aggregating round {}",
                u.client, u.round, state.round
            )));
        }
        if !seen.insert(u.client) {
            return Err(Error::config(format!(
                "duplicate update from client {}",
                u.client
            )));
        }
    }
    Ok(())
}

/// The aggregation primitive: merges client contributions into the
/// global store by per-coordinate participation-weighted averaging.
///
/// Deltas are accumulated in f64 in ascending client-id order;
/// coordinates whose aggregate delta is exactly zero keep their old bit
/// pattern.
pub(crate) fn coverage_merge(
    global: &ParamStore<f32>,
    contributions: &[Contribution],
    n: usize,
) -> Result<ParamStore<f32>> {
    if n == 0 {
        return Err(Error::config("participant count must be positive"));
    }
    let mut order: Vec<&Contribution> = contributions.iter().collect();
    order.sort_by_key(|c| c.client);

    let mut touched: BTreeSet<&str> = BTreeSet::new();
    for c in &order {
        for name in c.tensors.keys() {
            touched.insert(name);
        }
    }

    let mut out = global.clone();
    let inv_n = 1.0 / n as f64;
    for name in touched {
        let old = global
            .try_get(name)
            .ok_or_else(|| Error::shape(format!("update names unknown global tensor {name}")))?;
        let old_data = old.data();
        let mut delta = vec![0.0f64; old.len()];
        for c in &order {
            let Some(tc) = c.tensors.get(name) else {
                continue;
            };
            if tc.coords.len() != tc.values.len() {
                return Err(Error::shape(format!(
                    "contribution for {name} has {} coordinates but {} values",
                    tc.coords.len(),
                    tc.values.len()
                )));
            }
            for (k, &coord) in tc.coords.iter().enumerate() {
                if coord >= old_data.len() {
                    return Err(Error::shape(format!(
                        "coordinate {coord} out of bounds for {name} of {} scalars",
                        old_data.len()
                    )));
                }
                delta[coord] += tc.values[k] as f64 - old_data[coord] as f64;
            }
        }
        let target = out.get_mut(name);
        for (coord, dv) in delta.iter().enumerate() {
            if *dv != 0.0 {
                target.data_mut()[coord] = (old_data[coord] as f64 + dv * inv_n) as f32;
            }
        }
    }
    Ok(out)
}

/// Mean cross-entropy of `logits` rows against integer targets, in f64
/// with a stable log-sum-exp.
pub fn mean_cross_entropy<S: Scalar>(
    logits: &crate::tensor::Tensor<S>,
    targets: &[u32],
) -> Result<f64> {
    let (n, v) = (logits.rows(), logits.cols());
    if targets.len() != n {
        return Err(Error::shape(format!(
            "{} targets for {} logit rows",
            targets.len(),
            n
        )));
    }
    if n == 0 {
        return Err(Error::shape("empty logits"));
    }
    let data = logits.data();
    let mut total = 0.0f64;
    for (r, &target) in targets.iter().enumerate() {
        if target as usize >= v {
            return Err(Error::shape(format!(
                "target {target} outside vocabulary {v}"
            )));
        }
        let row = &data[r * v..(r + 1) * v];
        let max = row
            .iter()
            .map(|&x| Scalar::to_f64(x))
            .fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&x| (Scalar::to_f64(x) - max).exp()).sum();
        total += max + sum_exp.ln() - Scalar::to_f64(row[target as usize]);
    }
    Ok(total / n as f64)
}
