//! Width-subset strategies. All three share one mechanism — carve a
//! narrower submodel out of the full model by index sets over the
//! embedding and FFN widths, train it whole, and merge sub-tensors back
//! by coordinate coverage — and differ only in how the index sets are
//! chosen:
//!
//! - static prefix: every round uses the leading `⌊s·Q⌋` indices, so
//!   smaller devices train nested slices of larger ones;
//! - rolling window: the window start advances by one index per round
//!   and wraps, so every coordinate is trained within `Q` consecutive
//!   rounds;
//! - per-batch switching: the device holds its largest feasible prefix
//!   and each mini-batch trains a uniformly drawn smaller prefix, with
//!   gradients zero-embedded into the held shapes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchitectureDescriptor, DeviceConstraint};
use crate::cost::{scaled_dim, subset_cost, TrainingShape};
use crate::error::{Error, Result};
use crate::nn::subset::{subset_embed, subset_extract, SubsetSpec};
use crate::nn::{AdamW, Counters, Model, ModelDims, ParamStore, Variant};
use crate::tensor::Tensor;

use super::{
    check_round_and_clients, coverage_merge, run_local_steps, trained_payload, AggregationState,
    BatchSource, ClientUpdate, Contribution, LocalOutcome, LocalSetup, LocalStats, Payload,
    TensorContribution, GRAD_OPT_BYTES_PER_SCALAR, UPLOAD_SCALAR_BYTES,
};

/// Static prefix index set `{0, …, ⌊s·q⌋−1}`.
pub fn heterofl_index_set(s: f64, q: usize) -> Result<Vec<usize>> {
    let width = checked_width(s, q)?;
    Ok((0..width).collect())
}

/// Rolling window of `⌊s·q⌋` indices starting at `round mod q`,
/// wrapping past the end. Returned in window order (start first).
pub fn fedrolex_index_set(round: usize, s: f64, q: usize) -> Result<Vec<usize>> {
    let width = checked_width(s, q)?;
    let start = round % q;
    let mut indices = Vec::with_capacity(width);
    if start + width <= q {
        indices.extend(start..start + width);
    } else {
        indices.extend(start..q);
        indices.extend(0..start + width - q);
    }
    Ok(indices)
}

fn checked_width(s: f64, q: usize) -> Result<usize> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::config(format!("width scale {s} outside (0, 1]")));
    }
    let width = scaled_dim(s, q);
    if width == 0 {
        return Err(Error::config(format!(
            "width scale {s} selects zero of {q} indices"
        )));
    }
    Ok(width)
}

/// Prefix subset over both scaled axes of the architecture.
pub fn heterofl_subset(arch: &ArchitectureDescriptor, s: f64) -> Result<SubsetSpec> {
    SubsetSpec::new(
        arch.embed_dim,
        arch.ffn_dim(),
        heterofl_index_set(s, arch.embed_dim)?,
        heterofl_index_set(s, arch.ffn_dim())?,
    )
}

/// Rolling-window subset over both scaled axes for the given round.
pub fn fedrolex_subset(
    arch: &ArchitectureDescriptor,
    s: f64,
    round: usize,
) -> Result<SubsetSpec> {
    let mut d = fedrolex_index_set(round, s, arch.embed_dim)?;
    let mut fh = fedrolex_index_set(round, s, arch.ffn_dim())?;
    d.sort_unstable();
    fh.sort_unstable();
    SubsetSpec::new(arch.embed_dim, arch.ffn_dim(), d, fh)
}

/// Levels from the configured list that fit under the device's maximum,
/// sorted ascending and deduplicated.
pub fn fjord_feasible_levels(levels: &[f64], s_max: f64) -> Result<Vec<f64>> {
    let mut feasible: Vec<f64> = levels
        .iter()
        .copied()
        .filter(|&s| s > 0.0 && s <= s_max)
        .collect();
    feasible.sort_by(f64::total_cmp);
    feasible.dedup();
    if feasible.is_empty() {
        return Err(Error::config(format!(
            "no configured width level fits under the device maximum {s_max}"
        )));
    }
    Ok(feasible)
}

/// Uniform draw of this mini-batch's width level.
pub fn fjord_sample_level(feasible: &[f64], rng: &mut ChaCha8Rng) -> Result<f64> {
    if feasible.is_empty() {
        return Err(Error::config("empty width level set"));
    }
    Ok(feasible[rng.random_range(0..feasible.len())])
}

/// Largest configured level whose predicted cost fits the device.
pub fn max_feasible_width_level(
    arch: &ArchitectureDescriptor,
    constraint: &DeviceConstraint,
    shape: &TrainingShape,
    levels: &[f64],
) -> Option<f64> {
    let mut sorted = levels.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .iter()
        .rev()
        .copied()
        .find(|&s| subset_cost(arch, s, shape).is_ok_and(|c| c.resource.fits(constraint)))
}

/// The submodel a subset spec carves out of the global store.
fn submodel(
    global: &ParamStore<f32>,
    arch: &ArchitectureDescriptor,
    spec: &SubsetSpec,
) -> Result<Model<f32>> {
    if spec.full_d != arch.embed_dim || spec.full_fh != arch.ffn_dim() {
        return Err(Error::shape(format!(
            "subset over widths {}×{} does not match the model's {}×{}",
            spec.full_d,
            spec.full_fh,
            arch.embed_dim,
            arch.ffn_dim()
        )));
    }
    let dims = ModelDims {
        layers: arch.layers,
        d: spec.sub_d(),
        heads: arch.heads,
        fh: spec.sub_fh(),
        vocab: arch.vocab,
        ctx: arch.context,
    };
    let mut model = Model::empty(dims, Variant::full(), vec![arch.layers])?;
    model.params = subset_extract(global, spec)?;
    Ok(model)
}

/// Trains the submodel selected by `spec` whole (embeddings stay
/// frozen) and uploads its sub-tensors with their index sets.
pub fn local_train_subset(
    global: &ParamStore<f32>,
    arch: &ArchitectureDescriptor,
    spec: &SubsetSpec,
    setup: &LocalSetup,
    batches: &mut BatchSource,
    rng: &mut ChaCha8Rng,
) -> Result<LocalOutcome> {
    let mut model = submodel(global, arch, spec)?;
    let stats = run_local_steps(&mut model, setup, batches, rng)?;
    let payload = Payload::Subset {
        spec: spec.clone(),
        tensors: trained_payload(&model)?,
    };
    Ok(LocalOutcome {
        update: ClientUpdate::new(setup.client, setup.round, payload),
        stats,
    })
}

/// Per-batch width switching: the client holds the prefix submodel at
/// its maximum level and every step trains a uniformly drawn feasible
/// level. Steps at narrower levels compute gradients on the nested
/// prefix and zero-embed them into the held shapes, so the single
/// optimizer updates covered coordinates from data and the rest only
/// through moment decay and weight decay — the behavior of masked
/// gradients under a decoupled-decay optimizer. The level draw precedes
/// the batch draw on the client stream.
pub fn local_train_fjord(
    global: &ParamStore<f32>,
    arch: &ArchitectureDescriptor,
    levels: &[f64],
    s_max: f64,
    setup: &LocalSetup,
    batches: &mut BatchSource,
    rng: &mut ChaCha8Rng,
) -> Result<LocalOutcome> {
    if setup.steps == 0 {
        return Err(Error::config("local training needs at least one step"));
    }
    let feasible = fjord_feasible_levels(levels, s_max)?;
    for &s in &feasible {
        let d = scaled_dim(s, arch.embed_dim);
        if d < arch.heads || !d.is_multiple_of(arch.heads) {
            return Err(Error::config(format!(
                "width level {s} gives width {d}, incompatible with {} heads",
                arch.heads
            )));
        }
    }
    let client_spec = heterofl_subset(arch, s_max)?;
    let mut model = submodel(global, arch, &client_spec)?;
    let loaded = model.params.total_scalars();
    let trained = model.trained_scalars();
    let trained_names = model.trained_names();

    let mut opt = AdamW::new(*setup.optimizer);
    let mut stats = LocalStats::default();
    let mut loss_sum = 0.0;
    for _ in 0..setup.steps {
        let level = fjord_sample_level(&feasible, rng)?;
        let batch = batches(rng)?;
        let mut counters = Counters::default();
        let (loss, grads) = if scaled_dim(level, arch.embed_dim) == model.dims.d
            && scaled_dim(level, arch.ffn_dim()) == model.dims.fh
        {
            let step = model.train_step(&batch, 0.0, rng, &mut counters)?;
            (step.loss, step.grads)
        } else {
            let rel = SubsetSpec::leading(
                model.dims.d,
                model.dims.fh,
                scaled_dim(level, arch.embed_dim),
                scaled_dim(level, arch.ffn_dim()),
            )?;
            let sub_dims = ModelDims {
                layers: model.dims.layers,
                d: rel.sub_d(),
                heads: model.dims.heads,
                fh: rel.sub_fh(),
                vocab: model.dims.vocab,
                ctx: model.dims.ctx,
            };
            let mut sub = Model::empty(sub_dims, Variant::full(), vec![sub_dims.layers])?;
            sub.params = subset_extract(&model.params, &rel)?;
            let step = sub.train_step(&batch, 0.0, rng, &mut counters)?;
            let mut embedded = ParamStore::new();
            for name in &trained_names {
                embedded.insert(
                    name.clone(),
                    Tensor::zeros(model.params.get(name).shape().to_vec()),
                );
            }
            subset_embed(&step.grads, &mut embedded, &rel)?;
            (step.loss, embedded)
        };
        if !loss.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite loss on client {} in round {}",
                setup.client, setup.round
            )));
        }
        opt.step(&mut model.params, &grads, setup.lr)?;
        loss_sum += loss;
        stats.flops += counters.flops;
        let step_mem = UPLOAD_SCALAR_BYTES * loaded
            + GRAD_OPT_BYTES_PER_SCALAR * trained
            + counters.activation_bytes
            + counters.output_bytes;
        stats.peak_memory_bytes = stats.peak_memory_bytes.max(step_mem);
    }
    stats.mean_loss = loss_sum / setup.steps as f64;

    let payload = Payload::Subset {
        spec: client_spec,
        tensors: trained_payload(&model)?,
    };
    Ok(LocalOutcome {
        update: ClientUpdate::new(setup.client, setup.round, payload),
        stats,
    })
}

/// Merges sub-tensors into the global model: each coordinate moves
/// toward the mean of the clients whose index sets cover it, weighted
/// by their share of the `n` participants; uncovered coordinates stay
/// bitwise unchanged.
pub fn aggregate_subset(
    state: &AggregationState,
    updates: &[ClientUpdate],
    n: usize,
) -> Result<ParamStore<f32>> {
    check_round_and_clients(state, updates, n)?;
    let mut contributions = Vec::with_capacity(updates.len());
    for update in updates {
        let Payload::Subset { spec, tensors } = &update.payload else {
            return Err(Error::config(format!(
                "client {} sent a payload kind this aggregator does not accept",
                update.client
            )));
        };
        let mut per_tensor = std::collections::BTreeMap::new();
        for (name, tensor) in tensors.iter() {
            let target = state
                .global
                .try_get(name)
                .ok_or_else(|| Error::shape(format!("update names unknown global tensor {name}")))?;
            let coords = spec.flat_map(name, target.shape())?;
            if coords.len() != tensor.len() {
                return Err(Error::shape(format!(
                    "sub tensor {name} has {} scalars, its index sets cover {}",
                    tensor.len(),
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
        }
        contributions.push(Contribution {
            client: update.client,
            tensors: per_tensor,
        });
    }
    coverage_merge(&state.global, &contributions, n)
}
