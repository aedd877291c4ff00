//! Analytic per-round resource costs: peak training memory (with a
//! component breakdown), upload bytes, and training FLOPs, for every
//! training scheme the simulator supports.
//!
//! All costs are derived from one shared block composition (`flops`
//! primitives + the canonical retained-activation set), which the tensor
//! engine mirrors op for op; equality between this model and the engine's
//! instrumented counters is therefore exact, not approximate.
//!
//! Memory model: peak = loaded parameters + (gradient + two AdamW moment
//! scalars per trained parameter) + retained activations + logit output
//! buffer. The canonical retained set per backward-path layer is
//! `B·T·(8D + 2F)` scalars (layer input, first norm output, Q, K, V,
//! attention context, residual sum, second norm output, FFN
//! pre-activation, FFN activation; F is the FFN hidden width) plus the
//! `B·h·T²` attention probability grid, with one extra `B·T·D` boundary
//! clone where the backward pass stops and one `B·T·D` clone of each
//! head's input. Adapter and factor intermediates add `B·T·z` per
//! affected linear. Embedding tables are always frozen and their lookup
//! retains nothing.

use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureDescriptor, DeviceConstraint, TrainingConfiguration};
use crate::error::{Error, Result};
use crate::flops;

/// Local training shape: `steps_per_round` mini-batches of `batch`
/// sequences, each `context` tokens long.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingShape {
    pub batch: usize,
    pub context: usize,
    pub steps_per_round: usize,
}

impl TrainingShape {
    pub fn new(batch: usize, context: usize, steps_per_round: usize) -> Result<Self> {
        if batch < 1 || context < 1 || steps_per_round < 1 {
            return Err(Error::config("training shape fields must be positive"));
        }
        Ok(TrainingShape {
            batch,
            context,
            steps_per_round,
        })
    }
}

/// Per-device, per-round resource footprint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceCost {
    /// Peak training memory in bytes.
    pub memory_bytes: u64,
    /// Bytes uploaded to the server per round (trained parameters only).
    pub upload_bytes: u64,
    /// Training FLOPs per round.
    pub flops: u64,
}

impl ResourceCost {
    /// Whether this footprint fits within a device budget (inclusive).
    pub fn fits(&self, c: &DeviceConstraint) -> bool {
        c.memory_bytes.allows(self.memory_bytes)
            && c.upload_bytes.allows(self.upload_bytes)
            && c.flops.allows(self.flops)
    }
}

/// Peak-memory components; they sum exactly to `memory_bytes`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub params_bytes: u64,
    pub grads_optimizer_bytes: u64,
    pub activations_bytes: u64,
    pub output_buffer_bytes: u64,
}

impl MemoryBreakdown {
    pub fn total(&self) -> u64 {
        self.params_bytes
            + self.grads_optimizer_bytes
            + self.activations_bytes
            + self.output_buffer_bytes
    }
}

/// Full costing result for one (scheme, knob) choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub resource: ResourceCost,
    pub breakdown: MemoryBreakdown,
    /// Scalar parameters the device loads.
    pub loaded_params: u64,
    /// Scalar parameters that receive gradients (and are uploaded).
    pub trained_params: u64,
}

/// Training scheme selector shared by the cost model, the engine, and
/// the federated strategies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Scheme {
    /// Train the last `trained_layers` blocks plus the head.
    LayerFt { trained_layers: usize },
    /// Rank-`rank` adapters on every block linear; norms and head train.
    Lora { rank: usize },
    /// Width subsetting at `scale`; the whole submodel trains.
    Subset { scale: f64 },
    /// Every block linear factored into a rank-`rank` pair; all train.
    LowRank { rank: usize },
    /// Early-exit training. Weak role: the trunk is truncated at
    /// `exit_layer` and only that exit head exists. Strong role: full
    /// trunk with both the early and the final exit.
    EarlyExit { exit_layer: usize, strong: bool },
}

/// Parameter-count scopes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamScope {
    Embedding,
    BlockLayer,
    Head,
    Total,
}

/// Exact scalar parameter counts of the unmodified model.
pub fn param_count(arch: &ArchitectureDescriptor, scope: ParamScope) -> u64 {
    let d = arch.embed_dim;
    let fh = arch.ffn_dim();
    match scope {
        ParamScope::Embedding => embed_params(d, arch.vocab, arch.context),
        ParamScope::BlockLayer => block_params(d, fh),
        ParamScope::Head => head_params(d, arch.vocab),
        ParamScope::Total => {
            embed_params(d, arch.vocab, arch.context)
                + arch.layers as u64 * block_params(d, fh)
                + head_params(d, arch.vocab)
        }
    }
}

/// Token table `V·D` plus learned position table `T·D`.
fn embed_params(d: usize, vocab: usize, context: usize) -> u64 {
    (vocab * d + context * d) as u64
}

/// One block: Q, K, V, and output projections with biases (4D²+4D), the
/// two FFN linears with biases, and two layer norms (gain + bias each).
fn block_params(d: usize, fh: usize) -> u64 {
    let qkv = 3 * (d * d + d);
    let proj = d * d + d;
    let ffn = (d * fh + fh) + (fh * d + d);
    let norms = 2 * (2 * d);
    (qkv + proj + ffn + norms) as u64
}

/// Final norm (gain + bias) plus output linear with bias.
fn head_params(d: usize, vocab: usize) -> u64 {
    (2 * d + d * vocab + vocab) as u64
}

/// Rank-`z` adapter pairs (no biases) on the four block linears.
fn adapter_params(d: usize, fh: usize, z: usize) -> u64 {
    block_linears(d, fh)
        .iter()
        .map(|&(p, q)| (z * (p + q)) as u64)
        .sum()
}

/// One block with every linear replaced by a factor pair; the second
/// factor carries the original output bias.
fn factored_block_params(d: usize, fh: usize, z: usize) -> u64 {
    let factors: u64 = block_linears(d, fh)
        .iter()
        .map(|&(p, q)| (z * (p + q) + q) as u64)
        .sum();
    factors + 2 * (2 * d) as u64
}

/// The four linear maps in a block, in execution order: the fused
/// QKV projection, the attention output projection, and the two FFN
/// linears.
fn block_linears(d: usize, fh: usize) -> [(usize, usize); 4] {
    [(d, 3 * d), (d, d), (d, fh), (fh, d)]
}

/// Width `⌊s·dim⌋` after subsetting.
pub fn scaled_dim(scale: f64, dim: usize) -> usize {
    (scale * dim as f64).floor() as usize
}

/// How each block linear participates in training. (Frozen whole layers
/// never reach a backward composition, so no frozen mode exists here;
/// the frozen main path inside `Adapter` charges pass-through cost.)
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LinearMode {
    Trained,
    Adapter { z: usize },
    Factored { z: usize },
}

#[derive(Clone, Copy)]
struct BlockDims {
    batch: usize,
    ctx: usize,
    heads: usize,
    d: usize,
    fh: usize,
}

impl BlockDims {
    fn n(&self) -> usize {
        self.batch * self.ctx
    }

    fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    fn probs(&self) -> usize {
        flops::probs_elems(self.batch, self.heads, self.ctx)
    }
}

fn linear_fwd_flops(n: usize, p: usize, q: usize, mode: LinearMode) -> u64 {
    match mode {
        LinearMode::Trained => flops::linear_fwd(n, p, q),
        LinearMode::Adapter { z } => {
            flops::linear_fwd(n, p, q)
                + flops::linear_fwd(n, p, z)
                + flops::linear_fwd(n, z, q)
                + flops::add(n * q)
        }
        LinearMode::Factored { z } => flops::linear_fwd(n, p, z) + flops::linear_fwd(n, z, q),
    }
}

fn linear_bwd_flops(n: usize, p: usize, q: usize, mode: LinearMode) -> u64 {
    match mode {
        LinearMode::Trained => flops::linear_bwd_trained(n, p, q),
        LinearMode::Adapter { z } => {
            flops::linear_bwd_frozen(n, p, q)
                + flops::linear_bwd_trained(n, z, q)
                + flops::linear_bwd_trained(n, p, z)
                + flops::add(n * p)
        }
        LinearMode::Factored { z } => {
            flops::linear_bwd_trained(n, z, q) + flops::linear_bwd_trained(n, p, z)
        }
    }
}

/// Forward FLOPs of one block: norm, QKV, attention (scores, softmax,
/// context), output projection, residual, norm, FFN with GELU, residual.
fn block_fwd_flops(dims: &BlockDims, mode: LinearMode) -> u64 {
    let n = dims.n();
    let [qkv, proj, ffn1, ffn2] = block_linears(dims.d, dims.fh);
    flops::layer_norm(n * dims.d)
        + linear_fwd_flops(n, qkv.0, qkv.1, mode)
        + flops::attn_product_fwd(dims.batch, dims.heads, dims.ctx, dims.head_dim())
        + flops::softmax(dims.probs())
        + flops::attn_product_fwd(dims.batch, dims.heads, dims.ctx, dims.head_dim())
        + linear_fwd_flops(n, proj.0, proj.1, mode)
        + flops::add(n * dims.d)
        + flops::layer_norm(n * dims.d)
        + linear_fwd_flops(n, ffn1.0, ffn1.1, mode)
        + flops::gelu(n * dims.fh)
        + linear_fwd_flops(n, ffn2.0, ffn2.1, mode)
        + flops::add(n * dims.d)
}

/// Backward FLOPs of one block: the mirror of the forward op list plus
/// the two residual-branch gradient merges.
fn block_bwd_flops(dims: &BlockDims, mode: LinearMode) -> u64 {
    let n = dims.n();
    let [qkv, proj, ffn1, ffn2] = block_linears(dims.d, dims.fh);
    linear_bwd_flops(n, ffn2.0, ffn2.1, mode)
        + flops::gelu(n * dims.fh)
        + linear_bwd_flops(n, ffn1.0, ffn1.1, mode)
        + flops::layer_norm(n * dims.d)
        + flops::add(n * dims.d)
        + linear_bwd_flops(n, proj.0, proj.1, mode)
        + flops::attn_product_bwd(dims.batch, dims.heads, dims.ctx, dims.head_dim())
        + flops::softmax(dims.probs())
        + flops::attn_product_bwd(dims.batch, dims.heads, dims.ctx, dims.head_dim())
        + linear_bwd_flops(n, qkv.0, qkv.1, mode)
        + flops::layer_norm(n * dims.d)
        + flops::add(n * dims.d)
}

/// Head forward: final norm, output linear, cross-entropy.
fn head_fwd_flops(n: usize, d: usize, vocab: usize) -> u64 {
    flops::layer_norm(n * d) + flops::linear_fwd(n, d, vocab) + flops::cross_entropy(n, vocab)
}

/// Head backward: cross-entropy gradient, trained output linear, a
/// re-run of the norm forward (its output is not retained), norm
/// backward.
fn head_bwd_flops(n: usize, d: usize, vocab: usize) -> u64 {
    flops::cross_entropy(n, vocab)
        + flops::linear_bwd_trained(n, d, vocab)
        + flops::layer_norm(n * d)
        + flops::layer_norm(n * d)
}

/// Retained scalars for one backward-path block, excluding boundary and
/// head-input clones. `extra_z` is the per-linear intermediate width for
/// adapters / factor pairs (0 when absent).
fn block_retained_elems(dims: &BlockDims, extra_z: usize) -> u64 {
    let n = dims.n();
    (8 * n * dims.d + 2 * n * dims.fh + dims.probs() + 4 * n * extra_z) as u64
}

struct Accounting {
    loaded_params: u64,
    trained_params: u64,
    activation_elems: u64,
    output_elems: u64,
    flops_per_step: u64,
}

fn finish(arch: &ArchitectureDescriptor, shape: &TrainingShape, acc: Accounting) -> CostReport {
    let sb = arch.scalar_bytes as u64;
    let breakdown = MemoryBreakdown {
        params_bytes: sb * acc.loaded_params,
        grads_optimizer_bytes: 3 * sb * acc.trained_params,
        activations_bytes: sb * acc.activation_elems,
        output_buffer_bytes: sb * acc.output_elems,
    };
    CostReport {
        resource: ResourceCost {
            memory_bytes: breakdown.total(),
            upload_bytes: sb * acc.trained_params,
            flops: shape.steps_per_round as u64 * acc.flops_per_step,
        },
        breakdown,
        loaded_params: acc.loaded_params,
        trained_params: acc.trained_params,
    }
}

/// Cost of layer finetuning: the full model is loaded, the last `t`
/// blocks and the head train, frozen layers contribute forward FLOPs
/// only and retain nothing.
pub fn layerft_cost(config: &TrainingConfiguration, shape: &TrainingShape) -> CostReport {
    let arch = &config.arch;
    let t = config.trained_layers as u64;
    let dims = BlockDims {
        batch: shape.batch,
        ctx: shape.context,
        heads: arch.heads,
        d: arch.embed_dim,
        fh: arch.ffn_dim(),
    };
    let n = dims.n();
    let l = arch.layers as u64;

    let flops_per_step = flops::embedding_fwd(n, dims.d)
        + l * block_fwd_flops(&dims, LinearMode::Trained)
        + t * block_bwd_flops(&dims, LinearMode::Trained)
        + head_fwd_flops(n, dims.d, arch.vocab)
        + head_bwd_flops(n, dims.d, arch.vocab);

    finish(
        arch,
        shape,
        Accounting {
            loaded_params: param_count(arch, ParamScope::Total),
            trained_params: t * block_params(dims.d, dims.fh) + head_params(dims.d, arch.vocab),
            activation_elems: (n * dims.d) as u64
                + t * block_retained_elems(&dims, 0)
                + (n * dims.d) as u64,
            output_elems: (n * arch.vocab) as u64,
            flops_per_step,
        },
    )
}

/// Cost of adapter training: rank-`z` pairs on every block linear,
/// norms and head trained, main weights and embeddings frozen; backward
/// reaches layer 1 because adapters sit everywhere.
pub fn lora_cost(arch: &ArchitectureDescriptor, rank: usize, shape: &TrainingShape) -> Result<CostReport> {
    if rank < 1 || rank > arch.embed_dim {
        return Err(Error::config(format!(
            "adapter rank {} out of range [1, {}]",
            rank, arch.embed_dim
        )));
    }
    let dims = BlockDims {
        batch: shape.batch,
        ctx: shape.context,
        heads: arch.heads,
        d: arch.embed_dim,
        fh: arch.ffn_dim(),
    };
    let n = dims.n();
    let l = arch.layers as u64;
    let mode = LinearMode::Adapter { z: rank };

    let flops_per_step = flops::embedding_fwd(n, dims.d)
        + l * block_fwd_flops(&dims, mode)
        + l * block_bwd_flops(&dims, mode)
        + head_fwd_flops(n, dims.d, arch.vocab)
        + head_bwd_flops(n, dims.d, arch.vocab);

    let per_layer_norms = 2 * (2 * dims.d) as u64;
    let trained = l * (adapter_params(dims.d, dims.fh, rank) + per_layer_norms)
        + head_params(dims.d, arch.vocab);

    Ok(finish(
        arch,
        shape,
        Accounting {
            loaded_params: param_count(arch, ParamScope::Total)
                + l * adapter_params(dims.d, dims.fh, rank),
            trained_params: trained,
            activation_elems: (n * dims.d) as u64
                + l * block_retained_elems(&dims, rank)
                + (n * dims.d) as u64,
            output_elems: (n * arch.vocab) as u64,
            flops_per_step,
        },
    ))
}

/// Cost of width subsetting at `scale`: every D-sized dimension shrinks
/// to `⌊s·D⌋` (the vocabulary does not), the whole submodel trains, and
/// backward reaches layer 1.
pub fn subset_cost(arch: &ArchitectureDescriptor, scale: f64, shape: &TrainingShape) -> Result<CostReport> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::config(format!("scale {scale} outside (0, 1]")));
    }
    let d = scaled_dim(scale, arch.embed_dim);
    let fh = scaled_dim(scale, arch.ffn_dim());
    if d < arch.heads {
        return Err(Error::infeasible(format!(
            "scale {scale} collapses width {} below {} heads",
            d, arch.heads
        )));
    }
    let dims = BlockDims {
        batch: shape.batch,
        ctx: shape.context,
        heads: arch.heads,
        d,
        fh,
    };
    let n = dims.n();
    let l = arch.layers as u64;

    let flops_per_step = flops::embedding_fwd(n, d)
        + l * block_fwd_flops(&dims, LinearMode::Trained)
        + l * block_bwd_flops(&dims, LinearMode::Trained)
        + head_fwd_flops(n, d, arch.vocab)
        + head_bwd_flops(n, d, arch.vocab);

    let trained = l * block_params(d, fh) + head_params(d, arch.vocab);

    Ok(finish(
        arch,
        shape,
        Accounting {
            loaded_params: embed_params(d, arch.vocab, arch.context) + trained,
            trained_params: trained,
            activation_elems: (n * d) as u64
                + l * block_retained_elems(&dims, 0)
                + (n * d) as u64,
            output_elems: (n * arch.vocab) as u64,
            flops_per_step,
        },
    ))
}

/// Cost of low-rank factorization: each block linear becomes a factor
/// pair P→z→Q, both factors train, as do norms and the head.
pub fn lowrank_cost(arch: &ArchitectureDescriptor, rank: usize, shape: &TrainingShape) -> Result<CostReport> {
    if rank < 1 || rank > arch.embed_dim {
        return Err(Error::config(format!(
            "factor rank {} out of range [1, {}]",
            rank, arch.embed_dim
        )));
    }
    let dims = BlockDims {
        batch: shape.batch,
        ctx: shape.context,
        heads: arch.heads,
        d: arch.embed_dim,
        fh: arch.ffn_dim(),
    };
    let n = dims.n();
    let l = arch.layers as u64;
    let mode = LinearMode::Factored { z: rank };

    let flops_per_step = flops::embedding_fwd(n, dims.d)
        + l * block_fwd_flops(&dims, mode)
        + l * block_bwd_flops(&dims, mode)
        + head_fwd_flops(n, dims.d, arch.vocab)
        + head_bwd_flops(n, dims.d, arch.vocab);

    let trained = l * factored_block_params(dims.d, dims.fh, rank)
        + head_params(dims.d, arch.vocab);

    Ok(finish(
        arch,
        shape,
        Accounting {
            loaded_params: embed_params(dims.d, arch.vocab, arch.context) + trained,
            trained_params: trained,
            activation_elems: (n * dims.d) as u64
                + l * block_retained_elems(&dims, rank)
                + (n * dims.d) as u64,
            output_elems: (n * arch.vocab) as u64,
            flops_per_step,
        },
    ))
}

/// Cost of early-exit training. The weak role loads only the trunk up to
/// `exit_layer` plus that exit's head and trains all of it; the strong
/// role trains the full trunk and both exit heads, with both
/// cross-entropies and an extra gradient merge where the early exit
/// branches off.
pub fn earlyexit_cost(
    arch: &ArchitectureDescriptor,
    exit_layer: usize,
    strong: bool,
    shape: &TrainingShape,
) -> Result<CostReport> {
    if exit_layer < 1 || exit_layer > arch.layers {
        return Err(Error::config(format!(
            "exit layer {} out of range [1, {}]",
            exit_layer, arch.layers
        )));
    }
    if strong && exit_layer == arch.layers {
        return Err(Error::config(
            "strong role needs the early exit strictly before the final layer",
        ));
    }
    let dims = BlockDims {
        batch: shape.batch,
        ctx: shape.context,
        heads: arch.heads,
        d: arch.embed_dim,
        fh: arch.ffn_dim(),
    };
    let n = dims.n();
    let depth = if strong { arch.layers } else { exit_layer } as u64;
    let heads_active = if strong { 2u64 } else { 1 };

    let mut flops_per_step = flops::embedding_fwd(n, dims.d)
        + depth * block_fwd_flops(&dims, LinearMode::Trained)
        + depth * block_bwd_flops(&dims, LinearMode::Trained)
        + heads_active * (head_fwd_flops(n, dims.d, arch.vocab) + head_bwd_flops(n, dims.d, arch.vocab));
    if strong {
        // The early exit's gradient merges into the trunk gradient.
        flops_per_step += flops::add(n * dims.d);
    }

    let trained = depth * block_params(dims.d, dims.fh)
        + heads_active * head_params(dims.d, arch.vocab);

    Ok(finish(
        arch,
        shape,
        Accounting {
            loaded_params: embed_params(dims.d, arch.vocab, arch.context) + trained,
            trained_params: trained,
            activation_elems: (n * dims.d) as u64
                + depth * block_retained_elems(&dims, 0)
                + heads_active * (n * dims.d) as u64,
            output_elems: heads_active * (n * arch.vocab) as u64,
            flops_per_step,
        },
    ))
}

/// Dispatch over the scheme enum.
pub fn scheme_cost(
    arch: &ArchitectureDescriptor,
    scheme: &Scheme,
    shape: &TrainingShape,
) -> Result<CostReport> {
    match *scheme {
        Scheme::LayerFt { trained_layers } => {
            let config = TrainingConfiguration::new(*arch, trained_layers)?;
            Ok(layerft_cost(&config, shape))
        }
        Scheme::Lora { rank } => lora_cost(arch, rank, shape),
        Scheme::Subset { scale } => subset_cost(arch, scale, shape),
        Scheme::LowRank { rank } => lowrank_cost(arch, rank, shape),
        Scheme::EarlyExit { exit_layer, strong } => earlyexit_cost(arch, exit_layer, strong, shape),
    }
}

/// Breakdown rows for a list of (scheme, knob) choices, e.g. to compare
/// where each scheme's memory goes at a given shape.
pub fn memory_breakdown_report(
    arch: &ArchitectureDescriptor,
    schemes: &[Scheme],
    shape: &TrainingShape,
) -> Result<Vec<(Scheme, MemoryBreakdown)>> {
    schemes
        .iter()
        .map(|s| Ok((*s, scheme_cost(arch, s, shape)?.breakdown)))
        .collect()
}
