//! Tiny pre-norm decoder-only Transformer with manual backprop.
//!
//! One blueprint (`ModelDims` + `Variant` + exit depths) covers every
//! training scheme: plain training with a freeze boundary, rank-z
//! adapters on every block linear, factor-pair linears, width-scaled
//! submodels (just smaller dims), and truncated trunks or multi-exit
//! models for depth-scaled training.
//!
//! The forward pass retains exactly the canonical stored-activation set
//! for layers on the backward path — layer input, first norm output, the
//! fused QKV projection, attention probabilities, attention context,
//! residual sum, second norm output, FFN pre-activation and activation —
//! plus one boundary clone where the backward pass stops and one input
//! clone per exit head. Counters charge FLOPs through [`crate::flops`]
//! at the same op granularity the analytic cost model sums in closed
//! form, and count retained bytes at 4 bytes/scalar (the deployed
//! single-precision accounting unit) even when the engine runs in f64
//! verification mode.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::flops;
use crate::tensor::{for_each_row, mm_nn, mm_nt, mm_tn, Scalar, Tensor};

/// Accounting unit for retained-activation and output-buffer counters.
const COUNTED_SCALAR_BYTES: u64 = 4;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Instrumented execution counters, accumulated across steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// FLOPs charged through the shared accounting vocabulary.
    pub flops: u64,
    /// Bytes of activations retained for the backward pass.
    pub activation_bytes: u64,
    /// Bytes of logit output buffers.
    pub output_bytes: u64,
}

impl Counters {
    fn retain(&mut self, elems: usize) {
        self.activation_bytes += COUNTED_SCALAR_BYTES * elems as u64;
    }

    fn output(&mut self, elems: usize) {
        self.output_bytes += COUNTED_SCALAR_BYTES * elems as u64;
    }
}

/// Engine-level model dimensions. Unlike an architecture descriptor the
/// FFN width is explicit, because width-scaled submodels floor it
/// independently of the embedding width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub fh: usize,
    pub vocab: usize,
    pub ctx: usize,
}

impl ModelDims {
    pub fn from_arch(arch: &crate::arch::ArchitectureDescriptor) -> Self {
        ModelDims {
            layers: arch.layers,
            d: arch.embed_dim,
            heads: arch.heads,
            fh: arch.ffn_dim(),
            vocab: arch.vocab,
            ctx: arch.context,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1
            || self.d < 1
            || self.heads < 1
            || self.fh < 1
            || self.vocab < 1
            || self.ctx < 1
        {
            return Err(Error::shape("model dims must be positive"));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::shape(format!(
                "width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// How block linears train.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Layers at or above `first_trained` (0-based) train fully; layers
    /// below are frozen and excluded from the backward path. Embeddings
    /// train only when `train_embeddings` is set (pretraining).
    Plain {
        first_trained: usize,
        train_embeddings: bool,
    },
    /// Rank-`rank` adapter pairs on every block linear train, together
    /// with all layer norms and the head; main weights and biases stay
    /// frozen. Backward reaches layer 0.
    Lora { rank: usize },
    /// Every block linear is a factor pair P→rank→Q; the whole block
    /// stack and the head train. Backward reaches layer 0.
    Factored { rank: usize },
}

impl Variant {
    /// Plain full finetuning of all blocks + head (embeddings frozen).
    pub fn full() -> Self {
        Variant::Plain {
            first_trained: 0,
            train_embeddings: false,
        }
    }

    /// Plain training of the last `t` of `l` layers + head.
    pub fn last_layers(l: usize, t: usize) -> Self {
        Variant::Plain {
            first_trained: l - t,
            train_embeddings: false,
        }
    }
}

/// Named parameter tensors in deterministic (sorted) order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) {
        self.map.insert(name.into(), tensor);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<S>> {
        self.map.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<S>> {
        self.map.get(name)
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter tensor {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<S> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter tensor {name}"))
    }

    /// Adds `tensor` into the named slot, creating it if absent.
    pub fn accum(&mut self, name: &str, tensor: Tensor<S>) {
        match self.map.get_mut(name) {
            Some(t) => {
                assert_eq!(
                    t.shape(),
                    tensor.shape(),
                    "gradient shape mismatch for {name}"
                );
                for (a, b) in t.data_mut().iter_mut().zip(tensor.data()) {
                    *a += *b;
                }
            }
            None => {
                self.map.insert(name.to_string(), tensor);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn total_scalars(&self) -> u64 {
        self.map.values().map(|t| t.len() as u64).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// One training mini-batch: `batch` rows of `ctx` input tokens and their
/// next-token targets, both flattened row-major.
#[derive(Clone, Debug)]
pub struct Batch {
    pub batch: usize,
    pub ctx: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.batch * self.ctx
    }
}

/// Loss and gradients from one training step.
pub struct StepResult<S> {
    /// Sum of mean cross-entropies over the active exits.
    pub loss: f64,
    /// Per-exit mean cross-entropy, shallowest first.
    pub exit_losses: Vec<f64>,
    /// Gradients for trained parameters only.
    pub grads: ParamStore<S>,
}

pub struct Model<S> {
    pub dims: ModelDims,
    pub variant: Variant,
    /// Exit depths in ascending order; depth `e` reads the output of the
    /// first `e` layers. The deepest exit is always `dims.layers` and
    /// uses the `head.*` tensors; earlier exits use `exit{e}.*`.
    pub exits: Vec<usize>,
    pub params: ParamStore<S>,
}

pub(crate) const BLOCK_LINEARS: [&str; 4] = ["qkv", "attn_out", "ffn_in", "ffn_out"];

fn linear_shape(dims: &ModelDims, lin: &str) -> (usize, usize) {
    match lin {
        "qkv" => (dims.d, 3 * dims.d),
        "attn_out" => (dims.d, dims.d),
        "ffn_in" => (dims.d, dims.fh),
        "ffn_out" => (dims.fh, dims.d),
        _ => unreachable!("unknown linear {lin}"),
    }
}

/// Head tensor name prefix for the exit at `depth`.
pub fn exit_prefix(depth: usize, layers: usize) -> String {
    if depth == layers {
        "head".to_string()
    } else {
        format!("exit{depth}")
    }
}

impl<S: Scalar> Model<S> {
    /// Fresh model with seeded Gaussian(0, 0.02) weights, zero biases,
    /// unit norm gains; adapter up-matrices start at zero so the adapted
    /// output initially equals the main-path output.
    pub fn init(dims: ModelDims, variant: Variant, exits: Vec<usize>, seed: u64) -> Result<Self> {
        let mut model = Model::empty(dims, variant, exits)?;
        let mut rng = crate::rng::Splitter::new(seed).derive(&[0x696e6974]).rng();
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let mut randn = |shape: Vec<usize>| -> Tensor<S> {
            let len = shape.iter().product();
            Tensor::new(
                shape,
                (0..len)
                    .map(|_| S::from_f64(normal.sample(&mut rng)))
                    .collect(),
            )
        };

        let d = dims.d;
        model.params.insert("embed.tok", randn(vec![dims.vocab, d]));
        model.params.insert("embed.pos", randn(vec![dims.ctx, d]));
        for i in 0..dims.layers {
            for ln in ["ln1", "ln2"] {
                model.params.insert(
                    format!("layer{i}.{ln}.g"),
                    Tensor::new(vec![d], vec![S::one(); d]),
                );
                model
                    .params
                    .insert(format!("layer{i}.{ln}.b"), Tensor::zeros(vec![d]));
            }
            for lin in BLOCK_LINEARS {
                let (p, q) = linear_shape(&dims, lin);
                match variant {
                    Variant::Plain { .. } => {
                        model
                            .params
                            .insert(format!("layer{i}.{lin}.w"), randn(vec![p, q]));
                    }
                    Variant::Lora { rank } => {
                        model
                            .params
                            .insert(format!("layer{i}.{lin}.w"), randn(vec![p, q]));
                        model
                            .params
                            .insert(format!("layer{i}.{lin}.lora_down"), randn(vec![p, rank]));
                        model.params.insert(
                            format!("layer{i}.{lin}.lora_up"),
                            Tensor::zeros(vec![rank, q]),
                        );
                    }
                    Variant::Factored { rank } => {
                        model
                            .params
                            .insert(format!("layer{i}.{lin}.f1"), randn(vec![p, rank]));
                        model
                            .params
                            .insert(format!("layer{i}.{lin}.f2"), randn(vec![rank, q]));
                    }
                }
                model
                    .params
                    .insert(format!("layer{i}.{lin}.b"), Tensor::zeros(vec![q]));
            }
        }
        for &depth in &model.exits.clone() {
            let prefix = exit_prefix(depth, dims.layers);
            model.params.insert(
                format!("{prefix}.ln.g"),
                Tensor::new(vec![d], vec![S::one(); d]),
            );
            model
                .params
                .insert(format!("{prefix}.ln.b"), Tensor::zeros(vec![d]));
            model
                .params
                .insert(format!("{prefix}.out.w"), randn(vec![d, dims.vocab]));
            model
                .params
                .insert(format!("{prefix}.out.b"), Tensor::zeros(vec![dims.vocab]));
        }
        Ok(model)
    }

    /// Model shell with validated dims/variant/exits and no parameters.
    pub fn empty(dims: ModelDims, variant: Variant, exits: Vec<usize>) -> Result<Self> {
        dims.validate()?;
        if exits.is_empty() {
            return Err(Error::config("at least one exit required"));
        }
        let mut sorted = exits.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != exits {
            return Err(Error::config("exit depths must be ascending and distinct"));
        }
        if *exits.last().unwrap() != dims.layers || exits[0] < 1 {
            return Err(Error::config(format!(
                "exit depths {exits:?} must end at layer count {}",
                dims.layers
            )));
        }
        match variant {
            Variant::Plain { first_trained, .. } => {
                if first_trained >= dims.layers {
                    return Err(Error::config(format!(
                        "freeze boundary {first_trained} leaves no trained layer"
                    )));
                }
            }
            Variant::Lora { rank } | Variant::Factored { rank } => {
                if rank < 1 || rank > dims.d {
                    return Err(Error::config(format!(
                        "rank {rank} out of range [1, {}]",
                        dims.d
                    )));
                }
            }
        }
        Ok(Model {
            dims,
            variant,
            exits,
            params: ParamStore::new(),
        })
    }

    /// 0-based index of the first layer on the backward path.
    fn first_backward_layer(&self) -> usize {
        match self.variant {
            Variant::Plain { first_trained, .. } => first_trained,
            Variant::Lora { .. } | Variant::Factored { .. } => 0,
        }
    }

    fn train_embeddings(&self) -> bool {
        matches!(
            self.variant,
            Variant::Plain {
                train_embeddings: true,
                ..
            }
        )
    }

    /// Names of all trained tensors, in deterministic (sorted) order.
    pub fn trained_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.train_embeddings() {
            names.push("embed.pos".to_string());
            names.push("embed.tok".to_string());
        }
        for i in 0..self.dims.layers {
            match self.variant {
                Variant::Plain { first_trained, .. } => {
                    if i < first_trained {
                        continue;
                    }
                    for ln in ["ln1", "ln2"] {
                        names.push(format!("layer{i}.{ln}.g"));
                        names.push(format!("layer{i}.{ln}.b"));
                    }
                    for lin in BLOCK_LINEARS {
                        names.push(format!("layer{i}.{lin}.w"));
                        names.push(format!("layer{i}.{lin}.b"));
                    }
                }
                Variant::Lora { .. } => {
                    for ln in ["ln1", "ln2"] {
                        names.push(format!("layer{i}.{ln}.g"));
                        names.push(format!("layer{i}.{ln}.b"));
                    }
                    for lin in BLOCK_LINEARS {
                        names.push(format!("layer{i}.{lin}.lora_down"));
                        names.push(format!("layer{i}.{lin}.lora_up"));
                    }
                }
                Variant::Factored { .. } => {
                    for ln in ["ln1", "ln2"] {
                        names.push(format!("layer{i}.{ln}.g"));
                        names.push(format!("layer{i}.{ln}.b"));
                    }
                    for lin in BLOCK_LINEARS {
                        names.push(format!("layer{i}.{lin}.f1"));
                        names.push(format!("layer{i}.{lin}.f2"));
                        names.push(format!("layer{i}.{lin}.b"));
                    }
                }
            }
        }
        for &depth in &self.exits {
            let prefix = exit_prefix(depth, self.dims.layers);
            names.push(format!("{prefix}.ln.g"));
            names.push(format!("{prefix}.ln.b"));
            names.push(format!("{prefix}.out.w"));
            names.push(format!("{prefix}.out.b"));
        }
        names.sort();
        names
    }

    /// Scalar count over trained tensors (the upload payload unit).
    pub fn trained_scalars(&self) -> u64 {
        self.trained_names()
            .iter()
            .map(|n| self.params.get(n).len() as u64)
            .sum()
    }

    fn validate_batch(&self, batch: &Batch) -> Result<()> {
        if batch.batch < 1 || batch.ctx < 1 {
            return Err(Error::shape("empty batch"));
        }
        if batch.ctx > self.dims.ctx {
            return Err(Error::shape(format!(
                "sequence length {} exceeds context {}",
                batch.ctx, self.dims.ctx
            )));
        }
        if batch.inputs.len() != batch.rows() || batch.targets.len() != batch.rows() {
            return Err(Error::shape("token grid length mismatch"));
        }
        if let Some(&t) = batch
            .inputs
            .iter()
            .chain(batch.targets.iter())
            .find(|&&t| t as usize >= self.dims.vocab)
        {
            return Err(Error::shape(format!(
                "token id {t} outside vocabulary {}",
                self.dims.vocab
            )));
        }
        Ok(())
    }

    /// One forward/backward pass. Returns the summed cross-entropy over
    /// active exits and gradients for exactly the trained tensors.
    /// `dropout` > 0 retains masks for backward (pretraining only);
    /// dropout is not charged to counters because federated runs use
    /// rate 0.
    pub fn train_step(
        &self,
        batch: &Batch,
        dropout: f64,
        rng: &mut ChaCha8Rng,
        counters: &mut Counters,
    ) -> Result<StepResult<S>> {
        self.validate_batch(batch)?;
        let pass = self.forward_pass(batch, dropout, rng, true, counters)?;
        let grads = self.backward_pass(batch, pass, counters);
        Ok(grads)
    }

    /// Loss only, no caching and no counter effects — the workhorse for
    /// finite-difference verification.
    pub fn forward_loss(&self, batch: &Batch) -> Result<f64> {
        self.validate_batch(batch)?;
        let mut scratch = Counters::default();
        let mut rng = crate::rng::Splitter::new(0).rng();
        let pass = self.forward_pass(batch, 0.0, &mut rng, false, &mut scratch)?;
        Ok(pass.total_loss)
    }

    /// Final-exit logits for evaluation (no caching, no counters).
    pub fn forward_eval(&self, batch: usize, ctx: usize, inputs: &[u32]) -> Result<Tensor<S>> {
        let eval_batch = Batch {
            batch,
            ctx,
            inputs: inputs.to_vec(),
            targets: vec![0; inputs.len()],
        };
        self.validate_batch(&eval_batch)?;
        let mut scratch = Counters::default();
        let mut rng = crate::rng::Splitter::new(0).rng();
        let pass = self.forward_pass(&eval_batch, 0.0, &mut rng, false, &mut scratch)?;
        Ok(pass.exit_logits.into_iter().last().unwrap())
    }

    // ---- forward ----

    fn forward_pass(
        &self,
        batch: &Batch,
        dropout: f64,
        rng: &mut ChaCha8Rng,
        caching: bool,
        counters: &mut Counters,
    ) -> Result<Pass<S>> {
        let dims = self.dims;
        let n = batch.rows();
        let first_bwd = self.first_backward_layer();

        // Embedding: token row gather + learned position add.
        let mut x = Tensor::zeros(vec![n, dims.d]);
        {
            let tok = self.params.get("embed.tok");
            let pos = self.params.get("embed.pos");
            let (td, pd) = (tok.data(), pos.data());
            let ctx = batch.ctx;
            let inputs = &batch.inputs;
            for_each_row(x.data_mut(), dims.d, |r, row| {
                let id = inputs[r] as usize;
                let t_row = &td[id * dims.d..(id + 1) * dims.d];
                let p_row = &pd[(r % ctx) * dims.d..(r % ctx + 1) * dims.d];
                for ((o, &tv), &pv) in row.iter_mut().zip(t_row).zip(p_row) {
                    *o = tv + pv;
                }
            });
            counters.flops += flops::embedding_fwd(n, dims.d);
        }
        let mut pass = Pass::new(dims.layers);
        pass.dropout = dropout;
        if dropout > 0.0 {
            pass.embed_mask = Some(apply_dropout(&mut x, dropout, rng));
        }

        let mut exit_iter = self.exits.iter().peekable();
        for i in 0..dims.layers {
            let on_path = caching && (i >= first_bwd || self.train_embeddings());
            if caching && i == first_bwd && !self.train_embeddings() {
                // Boundary clone: the frozen region's output stays
                // retained while gradients flow above it.
                pass.boundary = Some(x.clone());
                counters.retain(n * dims.d);
            }
            x = self.layer_forward(i, x, batch, on_path.then_some(&mut pass), dropout, rng, counters);
            while exit_iter.peek() == Some(&&(i + 1)) {
                let depth = *exit_iter.next().unwrap();
                self.head_forward(depth, &x, batch, caching, &mut pass, counters);
            }
        }
        pass.total_loss = pass.exit_losses.iter().sum();
        Ok(pass)
    }

    fn linear_forward(
        &self,
        base: &str,
        x: &Tensor<S>,
        mids: Option<&mut Vec<Tensor<S>>>,
        counters: &mut Counters,
    ) -> Tensor<S> {
        let n = x.rows();
        let bias = self.params.get(&format!("{base}.b"));
        match self.variant {
            Variant::Plain { .. } => {
                let w = self.params.get(&format!("{base}.w"));
                counters.flops += flops::linear_fwd(n, w.rows(), w.cols());
                add_bias(mm_nn(x, w), bias)
            }
            Variant::Lora { .. } => {
                let w = self.params.get(&format!("{base}.w"));
                let down = self.params.get(&format!("{base}.lora_down"));
                let up = self.params.get(&format!("{base}.lora_up"));
                let (p, q, z) = (w.rows(), w.cols(), down.cols());
                counters.flops += flops::linear_fwd(n, p, q)
                    + flops::linear_fwd(n, p, z)
                    + flops::linear_fwd(n, z, q)
                    + flops::add(n * q);
                let mut out = mm_nn(x, w);
                let mid = mm_nn(x, down);
                let extra = mm_nn(&mid, up);
                for (o, &e) in out.data_mut().iter_mut().zip(extra.data()) {
                    *o += e;
                }
                if let Some(mids) = mids {
                    counters.retain(mid.len());
                    mids.push(mid);
                }
                add_bias(out, bias)
            }
            Variant::Factored { .. } => {
                let f1 = self.params.get(&format!("{base}.f1"));
                let f2 = self.params.get(&format!("{base}.f2"));
                let (p, z, q) = (f1.rows(), f1.cols(), f2.cols());
                counters.flops += flops::linear_fwd(n, p, z) + flops::linear_fwd(n, z, q);
                let mid = mm_nn(x, f1);
                let out = mm_nn(&mid, f2);
                if let Some(mids) = mids {
                    counters.retain(mid.len());
                    mids.push(mid);
                }
                add_bias(out, bias)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        i: usize,
        x: Tensor<S>,
        batch: &Batch,
        pass: Option<&mut Pass<S>>,
        dropout: f64,
        rng: &mut ChaCha8Rng,
        counters: &mut Counters,
    ) -> Tensor<S> {
        let n = batch.rows();
        let caching = pass.is_some();
        let mut mids = Vec::new();

        let ln1_out = ln_fwd(
            &x,
            self.params.get(&format!("layer{i}.ln1.g")),
            self.params.get(&format!("layer{i}.ln1.b")),
            counters,
        );
        let qkv = self.linear_forward(
            &format!("layer{i}.qkv"),
            &ln1_out,
            caching.then_some(&mut mids),
            counters,
        );
        let (probs, ctx_out) = self.attention_forward(&qkv, batch, counters);
        let mut attn = self.linear_forward(
            &format!("layer{i}.attn_out"),
            &ctx_out,
            caching.then_some(&mut mids),
            counters,
        );
        let attn_mask = (dropout > 0.0).then(|| apply_dropout(&mut attn, dropout, rng));

        // First residual: res1 = x + attn.
        let mut res1 = attn;
        for (o, &v) in res1.data_mut().iter_mut().zip(x.data()) {
            *o += v;
        }
        counters.flops += flops::add(n * self.dims.d);

        let ln2_out = ln_fwd(
            &res1,
            self.params.get(&format!("layer{i}.ln2.g")),
            self.params.get(&format!("layer{i}.ln2.b")),
            counters,
        );
        let ffn_pre = self.linear_forward(
            &format!("layer{i}.ffn_in"),
            &ln2_out,
            caching.then_some(&mut mids),
            counters,
        );
        let ffn_act = gelu_fwd(&ffn_pre, counters);
        let mut ffn_out = self.linear_forward(
            &format!("layer{i}.ffn_out"),
            &ffn_act,
            caching.then_some(&mut mids),
            counters,
        );
        let ffn_mask = (dropout > 0.0).then(|| apply_dropout(&mut ffn_out, dropout, rng));

        // Second residual: y = res1 + ffn_out.
        let mut y = ffn_out;
        for (o, &v) in y.data_mut().iter_mut().zip(res1.data()) {
            *o += v;
        }
        counters.flops += flops::add(n * self.dims.d);

        if let Some(pass) = pass {
            counters.retain(
                x.len()
                    + ln1_out.len()
                    + qkv.len()
                    + probs.len()
                    + ctx_out.len()
                    + res1.len()
                    + ln2_out.len()
                    + ffn_pre.len()
                    + ffn_act.len(),
            );
            pass.layer_caches[i] = Some(LayerCache {
                input: x,
                ln1_out,
                qkv,
                probs,
                ctx_out,
                res1,
                ln2_out,
                ffn_pre,
                ffn_act,
                mids,
                attn_mask,
                ffn_mask,
            });
        }
        y
    }

    /// Causal multi-head attention from the fused QKV projection:
    /// scaled scores, masked softmax, probability-weighted values.
    fn attention_forward(
        &self,
        qkv: &Tensor<S>,
        batch: &Batch,
        counters: &mut Counters,
    ) -> (Tensor<S>, Tensor<S>) {
        let dims = self.dims;
        let (bsz, t) = (batch.batch, batch.ctx);
        let (d, h, dh) = (dims.d, dims.heads, dims.head_dim());
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let qd = qkv.data();

        // Scores then in-place causal softmax, rows indexed (b, h, i).
        let mut probs = Tensor::zeros(vec![bsz * h * t, t]);
        for_each_row(probs.data_mut(), t, |r, row| {
            let (bh, i) = (r / t, r % t);
            let (b, hh) = (bh / h, bh % h);
            let q_row = &qd[(b * t + i) * 3 * d + hh * dh..(b * t + i) * 3 * d + hh * dh + dh];
            for (j, slot) in row.iter_mut().enumerate().take(i + 1) {
                let k_row =
                    &qd[(b * t + j) * 3 * d + d + hh * dh..(b * t + j) * 3 * d + d + hh * dh + dh];
                let mut acc = S::zero();
                for (&qv, &kv) in q_row.iter().zip(k_row) {
                    acc += qv * kv;
                }
                *slot = acc * scale;
            }
            let mut max = row[0];
            for &v in row.iter().take(i + 1) {
                if v > max {
                    max = v;
                }
            }
            let mut sum = S::zero();
            for slot in row.iter_mut().take(i + 1) {
                *slot = (*slot - max).exp();
                sum += *slot;
            }
            for slot in row.iter_mut().take(i + 1) {
                *slot /= sum;
            }
            for slot in row.iter_mut().skip(i + 1) {
                *slot = S::zero();
            }
        });
        counters.flops += flops::attn_product_fwd(bsz, h, t, dh)
            + flops::softmax(flops::probs_elems(bsz, h, t));

        let mut ctx_out = Tensor::zeros(vec![bsz * t, d]);
        let pd = probs.data();
        for_each_row(ctx_out.data_mut(), d, |r, row| {
            let (b, i) = (r / t, r % t);
            for hh in 0..h {
                let out = &mut row[hh * dh..(hh + 1) * dh];
                for j in 0..=i {
                    let p = pd[((b * h + hh) * t + i) * t + j];
                    let v_row = &qd
                        [(b * t + j) * 3 * d + 2 * d + hh * dh..(b * t + j) * 3 * d + 2 * d + hh * dh + dh];
                    for (o, &vv) in out.iter_mut().zip(v_row) {
                        *o += p * vv;
                    }
                }
            }
        });
        counters.flops += flops::attn_product_fwd(bsz, h, t, dh);

        (probs, ctx_out)
    }

    fn head_forward(
        &self,
        depth: usize,
        x: &Tensor<S>,
        batch: &Batch,
        caching: bool,
        pass: &mut Pass<S>,
        counters: &mut Counters,
    ) {
        let dims = self.dims;
        let n = batch.rows();
        let prefix = exit_prefix(depth, dims.layers);
        if caching {
            pass.exit_inputs.push(x.clone());
            counters.retain(n * dims.d);
        }
        let ln_out = ln_fwd(
            x,
            self.params.get(&format!("{prefix}.ln.g")),
            self.params.get(&format!("{prefix}.ln.b")),
            counters,
        );
        let w = self.params.get(&format!("{prefix}.out.w"));
        counters.flops += flops::linear_fwd(n, dims.d, dims.vocab);
        let logits = add_bias(mm_nn(&ln_out, w), self.params.get(&format!("{prefix}.out.b")));
        counters.output(n * dims.vocab);

        let loss = ce_loss(&logits, &batch.targets);
        counters.flops += flops::cross_entropy(n, dims.vocab);

        pass.exit_depths.push(depth);
        pass.exit_logits.push(logits);
        pass.exit_losses.push(loss);
    }

    // ---- backward ----

    fn backward_pass(
        &self,
        batch: &Batch,
        mut pass: Pass<S>,
        counters: &mut Counters,
    ) -> StepResult<S> {
        let dims = self.dims;
        let n = batch.rows();
        let first_bwd = self.first_backward_layer();
        let mut grads = ParamStore::new();

        // Walk depths from the deepest layer down, folding in each
        // exit's gradient where it branches off.
        let mut g: Option<Tensor<S>> = None;
        for depth in (1..=dims.layers).rev() {
            while pass.exit_depths.last() == Some(&depth) {
                pass.exit_depths.pop();
                let logits = pass.exit_logits.pop().unwrap();
                let input = pass.exit_inputs.pop().unwrap();
                let d_input =
                    self.head_backward(depth, &input, &logits, batch, &mut grads, counters);
                g = Some(match g.take() {
                    None => d_input,
                    Some(mut cur) => {
                        for (o, &v) in cur.data_mut().iter_mut().zip(d_input.data()) {
                            *o += v;
                        }
                        counters.flops += flops::add(n * dims.d);
                        cur
                    }
                });
            }
            let li = depth - 1;
            if li < first_bwd && !self.train_embeddings() {
                break;
            }
            if let Some(cache) = pass.layer_caches[li].take() {
                let d_y = g.take().unwrap();
                g = Some(self.layer_backward(
                    li,
                    &cache,
                    d_y,
                    batch,
                    pass.dropout,
                    &mut grads,
                    counters,
                ));
            }
        }

        if self.train_embeddings() {
            let mut d_y0 = g.take().unwrap();
            if let Some(mask) = &pass.embed_mask {
                mask_grad(&mut d_y0, mask, pass.dropout);
            }
            self.embedding_backward(&d_y0, batch, &mut grads, counters);
        }

        StepResult {
            loss: pass.total_loss,
            exit_losses: pass.exit_losses,
            grads,
        }
    }

    fn head_backward(
        &self,
        depth: usize,
        input: &Tensor<S>,
        logits: &Tensor<S>,
        batch: &Batch,
        grads: &mut ParamStore<S>,
        counters: &mut Counters,
    ) -> Tensor<S> {
        let dims = self.dims;
        let n = batch.rows();
        let prefix = exit_prefix(depth, dims.layers);

        let d_logits = ce_grad(logits, &batch.targets);
        counters.flops += flops::cross_entropy(n, dims.vocab);

        // The head norm's output is not retained, so re-run its forward.
        let gain = self.params.get(&format!("{prefix}.ln.g"));
        let bias = self.params.get(&format!("{prefix}.ln.b"));
        let ln_out = ln_fwd(input, gain, bias, counters);

        let w = self.params.get(&format!("{prefix}.out.w"));
        counters.flops += flops::linear_bwd_trained(n, dims.d, dims.vocab);
        grads.accum(&format!("{prefix}.out.w"), mm_tn(&ln_out, &d_logits));
        grads.accum(&format!("{prefix}.out.b"), col_sum(&d_logits));
        let d_ln_out = mm_nt(&d_logits, w);

        let (d_input, d_gain, d_bias) = ln_bwd(input, gain, &d_ln_out, counters);
        grads.accum(&format!("{prefix}.ln.g"), d_gain);
        grads.accum(&format!("{prefix}.ln.b"), d_bias);
        d_input
    }

    fn linear_backward(
        &self,
        base: &str,
        x: &Tensor<S>,
        mid: Option<&Tensor<S>>,
        d_out: &Tensor<S>,
        grads: &mut ParamStore<S>,
        counters: &mut Counters,
    ) -> Tensor<S> {
        let n = x.rows();
        match self.variant {
            Variant::Plain { .. } => {
                let w = self.params.get(&format!("{base}.w"));
                counters.flops += flops::linear_bwd_trained(n, w.rows(), w.cols());
                grads.accum(&format!("{base}.w"), mm_tn(x, d_out));
                grads.accum(&format!("{base}.b"), col_sum(d_out));
                mm_nt(d_out, w)
            }
            Variant::Lora { .. } => {
                let w = self.params.get(&format!("{base}.w"));
                let down = self.params.get(&format!("{base}.lora_down"));
                let up = self.params.get(&format!("{base}.lora_up"));
                let (p, q, z) = (w.rows(), w.cols(), down.cols());
                let mid = mid.expect("adapter intermediate missing");
                counters.flops += flops::linear_bwd_frozen(n, p, q)
                    + flops::linear_bwd_trained(n, z, q)
                    + flops::linear_bwd_trained(n, p, z)
                    + flops::add(n * p);
                let mut d_x = mm_nt(d_out, w);
                grads.accum(&format!("{base}.lora_up"), mm_tn(mid, d_out));
                let d_mid = mm_nt(d_out, up);
                grads.accum(&format!("{base}.lora_down"), mm_tn(x, &d_mid));
                let d_x2 = mm_nt(&d_mid, down);
                for (o, &v) in d_x.data_mut().iter_mut().zip(d_x2.data()) {
                    *o += v;
                }
                d_x
            }
            Variant::Factored { .. } => {
                let f1 = self.params.get(&format!("{base}.f1"));
                let f2 = self.params.get(&format!("{base}.f2"));
                let (p, z, q) = (f1.rows(), f1.cols(), f2.cols());
                let mid = mid.expect("factor intermediate missing");
                counters.flops += flops::linear_bwd_trained(n, z, q)
                    + flops::linear_bwd_trained(n, p, z);
                grads.accum(&format!("{base}.b"), col_sum(d_out));
                grads.accum(&format!("{base}.f2"), mm_tn(mid, d_out));
                let d_mid = mm_nt(d_out, f2);
                grads.accum(&format!("{base}.f1"), mm_tn(x, &d_mid));
                mm_nt(&d_mid, f1)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        i: usize,
        cache: &LayerCache<S>,
        d_y: Tensor<S>,
        batch: &Batch,
        dropout: f64,
        grads: &mut ParamStore<S>,
        counters: &mut Counters,
    ) -> Tensor<S> {
        let dims = self.dims;
        let n = batch.rows();
        let mid = |k: usize| cache.mids.get(k);

        // Second residual: d_y reaches both res1 (skip) and the FFN
        // branch (through its dropout mask during pretraining).
        let mut d_ffn_out = d_y.clone();
        if let Some(mask) = &cache.ffn_mask {
            mask_grad(&mut d_ffn_out, mask, dropout);
        }
        let d_act = self.linear_backward(
            &format!("layer{i}.ffn_out"),
            &cache.ffn_act,
            mid(3),
            &d_ffn_out,
            grads,
            counters,
        );
        let d_pre = gelu_bwd(&cache.ffn_pre, &d_act, counters);
        let d_ln2_out = self.linear_backward(
            &format!("layer{i}.ffn_in"),
            &cache.ln2_out,
            mid(2),
            &d_pre,
            grads,
            counters,
        );
        let gain2 = self.params.get(&format!("layer{i}.ln2.g"));
        let (d_res1_branch, d_g2, d_b2) = ln_bwd(&cache.res1, gain2, &d_ln2_out, counters);
        grads.accum(&format!("layer{i}.ln2.g"), d_g2);
        grads.accum(&format!("layer{i}.ln2.b"), d_b2);

        let mut d_res1 = d_y;
        for (o, &v) in d_res1.data_mut().iter_mut().zip(d_res1_branch.data()) {
            *o += v;
        }
        counters.flops += flops::add(n * dims.d);

        // First residual: d_res1 reaches both x (skip) and the attention
        // branch.
        let mut d_attn = d_res1.clone();
        if let Some(mask) = &cache.attn_mask {
            mask_grad(&mut d_attn, mask, dropout);
        }
        let d_ctx = self.linear_backward(
            &format!("layer{i}.attn_out"),
            &cache.ctx_out,
            mid(1),
            &d_attn,
            grads,
            counters,
        );
        let d_qkv = self.attention_backward(&d_ctx, &cache.qkv, &cache.probs, batch, counters);
        let d_ln1_out = self.linear_backward(
            &format!("layer{i}.qkv"),
            &cache.ln1_out,
            mid(0),
            &d_qkv,
            grads,
            counters,
        );
        let gain1 = self.params.get(&format!("layer{i}.ln1.g"));
        let (d_x_branch, d_g1, d_b1) = ln_bwd(&cache.input, gain1, &d_ln1_out, counters);
        grads.accum(&format!("layer{i}.ln1.g"), d_g1);
        grads.accum(&format!("layer{i}.ln1.b"), d_b1);

        let mut d_x = d_res1;
        for (o, &v) in d_x.data_mut().iter_mut().zip(d_x_branch.data()) {
            *o += v;
        }
        counters.flops += flops::add(n * dims.d);
        d_x
    }

    /// Gradients through both attention products and the masked softmax,
    /// assembled back into fused-QKV layout.
    fn attention_backward(
        &self,
        d_ctx: &Tensor<S>,
        qkv: &Tensor<S>,
        probs: &Tensor<S>,
        batch: &Batch,
        counters: &mut Counters,
    ) -> Tensor<S> {
        let dims = self.dims;
        let (bsz, t) = (batch.batch, batch.ctx);
        let (d, h, dh) = (dims.d, dims.heads, dims.head_dim());
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, pd, dc) = (qkv.data(), probs.data(), d_ctx.data());

        // d_probs then in-place softmax backward → d_scores (scaled).
        let mut d_scores = Tensor::zeros(vec![bsz * h * t, t]);
        for_each_row(d_scores.data_mut(), t, |r, row| {
            let (bh, i) = (r / t, r % t);
            let (b, hh) = (bh / h, bh % h);
            let dc_row = &dc[(b * t + i) * d + hh * dh..(b * t + i) * d + hh * dh + dh];
            for (j, slot) in row.iter_mut().enumerate().take(i + 1) {
                let v_row = &qd
                    [(b * t + j) * 3 * d + 2 * d + hh * dh..(b * t + j) * 3 * d + 2 * d + hh * dh + dh];
                let mut acc = S::zero();
                for (&dv, &vv) in dc_row.iter().zip(v_row) {
                    acc += dv * vv;
                }
                *slot = acc;
            }
            let p_row = &pd[r * t..(r + 1) * t];
            let mut dot = S::zero();
            for j in 0..=i {
                dot += row[j] * p_row[j];
            }
            for j in 0..=i {
                row[j] = p_row[j] * (row[j] - dot);
            }
        });
        counters.flops += flops::softmax(flops::probs_elems(bsz, h, t));

        // dQ, dK, dV written into one fused [n, 3d] gradient; each row is
        // owned by exactly one task.
        let ds = d_scores.data();
        let mut d_qkv = Tensor::zeros(vec![bsz * t, 3 * d]);
        for_each_row(d_qkv.data_mut(), 3 * d, |r, row| {
            let (b, pos) = (r / t, r % t);
            for hh in 0..h {
                let base = (b * h + hh) * t;
                // dQ at query position i = pos.
                {
                    let out = &mut row[hh * dh..hh * dh + dh];
                    for j in 0..=pos {
                        let s = ds[(base + pos) * t + j] * scale;
                        let k_row = &qd
                            [(b * t + j) * 3 * d + d + hh * dh..(b * t + j) * 3 * d + d + hh * dh + dh];
                        for (o, &kv) in out.iter_mut().zip(k_row) {
                            *o += s * kv;
                        }
                    }
                }
                // dK at key position j = pos.
                {
                    let out_start = d + hh * dh;
                    for i in pos..t {
                        let s = ds[(base + i) * t + pos] * scale;
                        let q_row =
                            &qd[(b * t + i) * 3 * d + hh * dh..(b * t + i) * 3 * d + hh * dh + dh];
                        let out = &mut row[out_start..out_start + dh];
                        for (o, &qv) in out.iter_mut().zip(q_row) {
                            *o += s * qv;
                        }
                    }
                }
                // dV at value position j = pos.
                {
                    let out_start = 2 * d + hh * dh;
                    for i in pos..t {
                        let p = pd[(base + i) * t + pos];
                        let dc_row =
                            &dc[(b * t + i) * d + hh * dh..(b * t + i) * d + hh * dh + dh];
                        let out = &mut row[out_start..out_start + dh];
                        for (o, &dv) in out.iter_mut().zip(dc_row) {
                            *o += p * dv;
                        }
                    }
                }
            }
        });
        counters.flops +=
            flops::attn_product_bwd(bsz, h, t, dh) + flops::attn_product_bwd(bsz, h, t, dh);
        d_qkv
    }

    fn embedding_backward(
        &self,
        d_y0: &Tensor<S>,
        batch: &Batch,
        grads: &mut ParamStore<S>,
        counters: &mut Counters,
    ) {
        let dims = self.dims;
        let n = batch.rows();
        let mut d_tok = Tensor::zeros(vec![dims.vocab, dims.d]);
        let mut d_pos = Tensor::zeros(vec![dims.ctx, dims.d]);
        let dd = d_y0.data();
        for r in 0..n {
            let row = &dd[r * dims.d..(r + 1) * dims.d];
            let id = batch.inputs[r] as usize;
            for (o, &v) in d_tok.data_mut()[id * dims.d..(id + 1) * dims.d]
                .iter_mut()
                .zip(row)
            {
                *o += v;
            }
            let p = r % batch.ctx;
            for (o, &v) in d_pos.data_mut()[p * dims.d..(p + 1) * dims.d]
                .iter_mut()
                .zip(row)
            {
                *o += v;
            }
        }
        counters.flops += flops::add(n * dims.d);
        grads.accum("embed.tok", d_tok);
        grads.accum("embed.pos", d_pos);
    }
}

struct Pass<S> {
    /// Frozen-region output pinned alive across the backward pass, as a
    /// deployed implementation would hold it. Only its byte count feeds
    /// the result.
    #[allow(dead_code)]
    boundary: Option<Tensor<S>>,
    layer_caches: Vec<Option<LayerCache<S>>>,
    exit_depths: Vec<usize>,
    exit_inputs: Vec<Tensor<S>>,
    exit_logits: Vec<Tensor<S>>,
    exit_losses: Vec<f64>,
    embed_mask: Option<Vec<u8>>,
    dropout: f64,
    total_loss: f64,
}

impl<S: Scalar> Pass<S> {
    fn new(layers: usize) -> Self {
        Pass {
            boundary: None,
            layer_caches: (0..layers).map(|_| None).collect(),
            exit_depths: Vec::new(),
            exit_inputs: Vec::new(),
            exit_logits: Vec::new(),
            exit_losses: Vec::new(),
            embed_mask: None,
            dropout: 0.0,
            total_loss: 0.0,
        }
    }
}

struct LayerCache<S> {
    input: Tensor<S>,
    ln1_out: Tensor<S>,
    qkv: Tensor<S>,
    probs: Tensor<S>,
    ctx_out: Tensor<S>,
    res1: Tensor<S>,
    ln2_out: Tensor<S>,
    ffn_pre: Tensor<S>,
    ffn_act: Tensor<S>,
    mids: Vec<Tensor<S>>,
    attn_mask: Option<Vec<u8>>,
    ffn_mask: Option<Vec<u8>>,
}

fn add_bias<S: Scalar>(mut out: Tensor<S>, bias: &Tensor<S>) -> Tensor<S> {
    let q = bias.len();
    let bd = bias.data().to_vec();
    for_each_row(out.data_mut(), q, |_, row| {
        for (o, &b) in row.iter_mut().zip(&bd) {
            *o += b;
        }
    });
    out
}

/// Layer norm forward; charges 8 FLOPs/element.
fn ln_fwd<S: Scalar>(x: &Tensor<S>, gain: &Tensor<S>, bias: &Tensor<S>, counters: &mut Counters) -> Tensor<S> {
    let d = gain.len();
    let eps = S::from_f64(LN_EPS);
    let mut out = Tensor::zeros(x.shape().to_vec());
    let (xd, gd, bd) = (x.data(), gain.data(), bias.data());
    for_each_row(out.data_mut(), d, |r, row| {
        let x_row = &xd[r * d..(r + 1) * d];
        let inv_n = S::from_f64(1.0 / d as f64);
        let mut mean = S::zero();
        for &v in x_row {
            mean += v;
        }
        mean *= inv_n;
        let mut var = S::zero();
        for &v in x_row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_n;
        let inv_std = (var + eps).sqrt().recip();
        for (j, o) in row.iter_mut().enumerate() {
            *o = (x_row[j] - mean) * inv_std * gd[j] + bd[j];
        }
    });
    counters.flops += flops::layer_norm(x.len());
    out
}

/// Layer norm backward from the cached input; charges 8 FLOPs/element.
/// Returns (d_input, d_gain, d_bias).
fn ln_bwd<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    d_out: &Tensor<S>,
    counters: &mut Counters,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let d = gain.len();
    let rows = x.len() / d;
    let eps = S::from_f64(LN_EPS);
    let inv_n = S::from_f64(1.0 / d as f64);
    let (xd, gd, dod) = (x.data(), gain.data(), d_out.data());

    let mut d_x = Tensor::zeros(x.shape().to_vec());
    for_each_row(d_x.data_mut(), d, |r, row| {
        let x_row = &xd[r * d..(r + 1) * d];
        let do_row = &dod[r * d..(r + 1) * d];
        let mut mean = S::zero();
        for &v in x_row {
            mean += v;
        }
        mean *= inv_n;
        let mut var = S::zero();
        for &v in x_row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_n;
        let inv_std = (var + eps).sqrt().recip();
        let mut sum_dxhat = S::zero();
        let mut sum_dxhat_xhat = S::zero();
        for j in 0..d {
            let xhat = (x_row[j] - mean) * inv_std;
            let dxhat = do_row[j] * gd[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        let mean_dxhat = sum_dxhat * inv_n;
        let mean_dxhat_xhat = sum_dxhat_xhat * inv_n;
        for (j, o) in row.iter_mut().enumerate() {
            let xhat = (x_row[j] - mean) * inv_std;
            let dxhat = do_row[j] * gd[j];
            *o = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std;
        }
    });

    // Parameter gradients accumulate sequentially over rows for
    // deterministic summation order.
    let mut d_gain = Tensor::zeros(vec![d]);
    let mut d_bias = Tensor::zeros(vec![d]);
    for r in 0..rows {
        let x_row = &xd[r * d..(r + 1) * d];
        let do_row = &dod[r * d..(r + 1) * d];
        let mut mean = S::zero();
        for &v in x_row {
            mean += v;
        }
        mean *= inv_n;
        let mut var = S::zero();
        for &v in x_row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_n;
        let inv_std = (var + eps).sqrt().recip();
        for j in 0..d {
            let xhat = (x_row[j] - mean) * inv_std;
            d_gain.data_mut()[j] += do_row[j] * xhat;
            d_bias.data_mut()[j] += do_row[j];
        }
    }
    counters.flops += flops::layer_norm(x.len());
    (d_x, d_gain, d_bias)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

/// GELU (tanh approximation) forward; charges 8 FLOPs/element.
fn gelu_fwd<S: Scalar>(x: &Tensor<S>, counters: &mut Counters) -> Tensor<S> {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let mut out = Tensor::zeros(x.shape().to_vec());
    let xd = x.data();
    let cols = x.shape().last().copied().unwrap_or(1);
    for_each_row(out.data_mut(), cols, |r, row| {
        for (j, o) in row.iter_mut().enumerate() {
            let v = xd[r * cols + j];
            let u = c * (v + a * v * v * v);
            *o = half * v * (S::one() + u.tanh());
        }
    });
    counters.flops += flops::gelu(x.len());
    out
}

/// GELU backward from the cached pre-activation; charges 8 FLOPs/element.
fn gelu_bwd<S: Scalar>(pre: &Tensor<S>, d_out: &Tensor<S>, counters: &mut Counters) -> Tensor<S> {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let mut d_in = Tensor::zeros(pre.shape().to_vec());
    let (xd, dd) = (pre.data(), d_out.data());
    let cols = pre.shape().last().copied().unwrap_or(1);
    for_each_row(d_in.data_mut(), cols, |r, row| {
        for (j, o) in row.iter_mut().enumerate() {
            let v = xd[r * cols + j];
            let u = c * (v + a * v * v * v);
            let t = u.tanh();
            let du = c * (S::one() + three * a * v * v);
            let grad = half * (S::one() + t) + half * v * (S::one() - t * t) * du;
            *o = dd[r * cols + j] * grad;
        }
    });
    counters.flops += flops::gelu(pre.len());
    d_in
}

/// Mean next-token cross-entropy over all rows (numerically stable
/// log-sum-exp); accumulated in f64.
fn ce_loss<S: Scalar>(logits: &Tensor<S>, targets: &[u32]) -> f64 {
    let v = logits.cols();
    let n = logits.rows();
    let ld = logits.data();
    let mut total = 0.0f64;
    for r in 0..n {
        let row = &ld[r * v..(r + 1) * v];
        let mut max = row[0];
        for &x in row {
            if x > max {
                max = x;
            }
        }
        let mut sum = 0.0f64;
        for &x in row {
            sum += (x - max).to_f64().exp();
        }
        let lse = max.to_f64() + sum.ln();
        total += lse - row[targets[r] as usize].to_f64();
    }
    total / n as f64
}

/// d loss / d logits for the mean cross-entropy: (softmax − onehot)/n.
fn ce_grad<S: Scalar>(logits: &Tensor<S>, targets: &[u32]) -> Tensor<S> {
    let v = logits.cols();
    let n = logits.rows();
    let ld = logits.data();
    let inv_n = S::from_f64(1.0 / n as f64);
    let mut d = Tensor::zeros(vec![n, v]);
    for_each_row(d.data_mut(), v, |r, row| {
        let l_row = &ld[r * v..(r + 1) * v];
        let mut max = l_row[0];
        for &x in l_row {
            if x > max {
                max = x;
            }
        }
        let mut sum = S::zero();
        for &x in l_row {
            sum += (x - max).exp();
        }
        for (j, o) in row.iter_mut().enumerate() {
            *o = (l_row[j] - max).exp() / sum * inv_n;
        }
        row[targets[r] as usize] -= inv_n;
    });
    d
}

fn col_sum<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, q) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(vec![q]);
    for r in 0..n {
        for (o, &v) in out.data_mut().iter_mut().zip(&x.data()[r * q..(r + 1) * q]) {
            *o += v;
        }
    }
    out
}

/// Inverted dropout in place; returns the keep mask.
fn apply_dropout<S: Scalar>(x: &mut Tensor<S>, rate: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    use rand::Rng;
    let keep = S::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<u8> = (0..x.len())
        .map(|_| u8::from(rng.random::<f64>() >= rate))
        .collect();
    for (v, &m) in x.data_mut().iter_mut().zip(&mask) {
        *v = if m == 1 { *v * keep } else { S::zero() };
    }
    mask
}

/// Applies a stored keep mask (with the matching inverted-dropout scale)
/// to a gradient.
fn mask_grad<S: Scalar>(g: &mut Tensor<S>, mask: &[u8], rate: f64) {
    let keep = S::from_f64(1.0 / (1.0 - rate));
    for (v, &m) in g.data_mut().iter_mut().zip(mask) {
        *v = if m == 1 { *v * keep } else { S::zero() };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchitectureDescriptor, TrainingConfiguration};
    use crate::cost::{
        earlyexit_cost, layerft_cost, lora_cost, lowrank_cost, subset_cost, TrainingShape,
    };

    fn tiny_arch() -> ArchitectureDescriptor {
        ArchitectureDescriptor::tiny(2)
    }

    fn toy_batch(batch: usize, ctx: usize, vocab: usize, seed: u64) -> Batch {
        use rand::Rng;
        let mut rng = crate::rng::Splitter::new(seed).rng();
        let n = batch * ctx;
        Batch {
            batch,
            ctx,
            inputs: (0..n).map(|_| rng.random_range(0..vocab as u32)).collect(),
            targets: (0..n).map(|_| rng.random_range(0..vocab as u32)).collect(),
        }
    }

    fn step_counters(model: &Model<f64>, batch: &Batch) -> (Counters, StepResult<f64>) {
        let mut counters = Counters::default();
        let mut rng = crate::rng::Splitter::new(1).rng();
        let step = model.train_step(batch, 0.0, &mut rng, &mut counters).unwrap();
        (counters, step)
    }

    #[test]
    fn init_is_deterministic() {
        let dims = ModelDims::from_arch(&tiny_arch());
        let a = Model::<f32>::init(dims, Variant::full(), vec![2], 5).unwrap();
        let b = Model::<f32>::init(dims, Variant::full(), vec![2], 5).unwrap();
        assert_eq!(a.params.names(), b.params.names());
        for (name, t) in a.params.iter() {
            assert_eq!(t, b.params.get(name), "{name}");
        }
        let c = Model::<f32>::init(dims, Variant::full(), vec![2], 6).unwrap();
        assert_ne!(a.params.get("embed.tok"), c.params.get("embed.tok"));
    }

    #[test]
    fn zeroed_head_gives_uniform_loss() {
        let dims = ModelDims::from_arch(&tiny_arch());
        let mut model = Model::<f64>::init(dims, Variant::full(), vec![2], 7).unwrap();
        for v in model.params.get_mut("head.out.w").data_mut() {
            *v = 0.0;
        }
        let batch = toy_batch(2, 8, dims.vocab, 3);
        let loss = model.forward_loss(&batch).unwrap();
        assert!((loss - (dims.vocab as f64).ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn grads_cover_exactly_the_trained_names() {
        let dims = ModelDims::from_arch(&tiny_arch());
        let batch = toy_batch(2, 8, dims.vocab, 4);
        for variant in [
            Variant::full(),
            Variant::last_layers(2, 1),
            Variant::Lora { rank: 2 },
            Variant::Factored { rank: 4 },
            Variant::Plain {
                first_trained: 0,
                train_embeddings: true,
            },
        ] {
            let model = Model::<f64>::init(dims, variant, vec![2], 11).unwrap();
            let (_, step) = step_counters(&model, &batch);
            assert_eq!(step.grads.names(), model.trained_names(), "{variant:?}");
        }
    }

    #[test]
    fn logits_are_causal() {
        let dims = ModelDims::from_arch(&tiny_arch());
        let model = Model::<f64>::init(dims, Variant::full(), vec![2], 13).unwrap();
        let mut inputs: Vec<u32> = (0..8).map(|k| k % dims.vocab as u32).collect();
        let before = model.forward_eval(1, 8, &inputs).unwrap();
        inputs[7] = (inputs[7] + 3) % dims.vocab as u32;
        let after = model.forward_eval(1, 8, &inputs).unwrap();
        let v = dims.vocab;
        assert_eq!(before.data()[..7 * v], after.data()[..7 * v]);
        assert_ne!(before.data()[7 * v..], after.data()[7 * v..]);
    }

    #[test]
    fn train_step_is_deterministic() {
        let dims = ModelDims::from_arch(&tiny_arch());
        let model = Model::<f64>::init(dims, Variant::Lora { rank: 2 }, vec![2], 17).unwrap();
        let batch = toy_batch(2, 8, dims.vocab, 5);
        let (c1, s1) = step_counters(&model, &batch);
        let (c2, s2) = step_counters(&model, &batch);
        assert_eq!(c1, c2);
        assert_eq!(s1.loss.to_bits(), s2.loss.to_bits());
        for (name, g) in s1.grads.iter() {
            assert_eq!(g, s2.grads.get(name), "{name}");
        }
    }

    #[test]
    fn exit_heads_are_independent() {
        let dims = ModelDims::from_arch(&tiny_arch());
        let mut model = Model::<f64>::init(dims, Variant::full(), vec![1, 2], 19).unwrap();
        let inputs: Vec<u32> = (0..8).collect();
        let before = model.forward_eval(1, 8, &inputs).unwrap();
        model.params.get_mut("exit1.out.w").data_mut()[0] += 10.0;
        let after = model.forward_eval(1, 8, &inputs).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn counters_match_layerft_costs() {
        let arch = tiny_arch();
        let dims = ModelDims::from_arch(&arch);
        let shape = TrainingShape::new(2, 8, 1).unwrap();
        let batch = toy_batch(2, 8, dims.vocab, 6);
        for t in 1..=2 {
            let report = layerft_cost(
                &TrainingConfiguration::new(arch, t).unwrap(),
                &shape,
            );
            let model =
                Model::<f64>::init(dims, Variant::last_layers(2, t), vec![2], 23).unwrap();
            let (counters, _) = step_counters(&model, &batch);
            assert_eq!(counters.flops, report.resource.flops, "flops t={t}");
            assert_eq!(
                counters.activation_bytes, report.breakdown.activations_bytes,
                "activations t={t}"
            );
            assert_eq!(
                counters.output_bytes, report.breakdown.output_buffer_bytes,
                "outputs t={t}"
            );
            assert_eq!(model.trained_scalars(), report.trained_params, "trained t={t}");
            assert_eq!(
                model.params.total_scalars(),
                report.loaded_params,
                "loaded t={t}"
            );
        }
    }

    #[test]
    fn counters_match_adapter_and_factor_costs() {
        let arch = tiny_arch();
        let dims = ModelDims::from_arch(&arch);
        let shape = TrainingShape::new(2, 8, 1).unwrap();
        let batch = toy_batch(2, 8, dims.vocab, 8);

        let report = lora_cost(&arch, 2, &shape).unwrap();
        let model = Model::<f64>::init(dims, Variant::Lora { rank: 2 }, vec![2], 29).unwrap();
        let (counters, _) = step_counters(&model, &batch);
        assert_eq!(counters.flops, report.resource.flops);
        assert_eq!(counters.activation_bytes, report.breakdown.activations_bytes);
        assert_eq!(counters.output_bytes, report.breakdown.output_buffer_bytes);
        assert_eq!(model.trained_scalars(), report.trained_params);
        assert_eq!(model.params.total_scalars(), report.loaded_params);

        let report = lowrank_cost(&arch, 4, &shape).unwrap();
        let model = Model::<f64>::init(dims, Variant::Factored { rank: 4 }, vec![2], 31).unwrap();
        let (counters, _) = step_counters(&model, &batch);
        assert_eq!(counters.flops, report.resource.flops);
        assert_eq!(counters.activation_bytes, report.breakdown.activations_bytes);
        assert_eq!(model.trained_scalars(), report.trained_params);
        assert_eq!(model.params.total_scalars(), report.loaded_params);
    }

    #[test]
    fn counters_match_subset_and_earlyexit_costs() {
        let arch = tiny_arch();
        let shape = TrainingShape::new(2, 8, 1).unwrap();
        let batch = toy_batch(2, 8, arch.vocab, 9);

        // Width subset at s=0.5: d 8→4, fh 32→16, heads unchanged.
        let report = subset_cost(&arch, 0.5, &shape).unwrap();
        let sub_dims = ModelDims {
            layers: 2,
            d: 4,
            heads: 2,
            fh: 16,
            vocab: arch.vocab,
            ctx: arch.context,
        };
        let model = Model::<f64>::init(sub_dims, Variant::full(), vec![2], 37).unwrap();
        let (counters, _) = step_counters(&model, &batch);
        assert_eq!(counters.flops, report.resource.flops);
        assert_eq!(counters.activation_bytes, report.breakdown.activations_bytes);
        assert_eq!(model.trained_scalars(), report.trained_params);
        assert_eq!(model.params.total_scalars(), report.loaded_params);

        // Weak early-exit role: truncated trunk, one exit at layer 1.
        let report = earlyexit_cost(&arch, 1, false, &shape).unwrap();
        let weak_dims = ModelDims { layers: 1, ..ModelDims::from_arch(&arch) };
        let model = Model::<f64>::init(weak_dims, Variant::full(), vec![1], 41).unwrap();
        let (counters, _) = step_counters(&model, &batch);
        assert_eq!(counters.flops, report.resource.flops);
        assert_eq!(counters.activation_bytes, report.breakdown.activations_bytes);
        assert_eq!(counters.output_bytes, report.breakdown.output_buffer_bytes);
        assert_eq!(model.trained_scalars(), report.trained_params);
        assert_eq!(model.params.total_scalars(), report.loaded_params);

        // Strong early-exit role: full trunk, exits at layers 1 and 2.
        let report = earlyexit_cost(&arch, 1, true, &shape).unwrap();
        let model = Model::<f64>::init(
            ModelDims::from_arch(&arch),
            Variant::full(),
            vec![1, 2],
            43,
        )
        .unwrap();
        let (counters, step) = step_counters(&model, &batch);
        assert_eq!(counters.flops, report.resource.flops);
        assert_eq!(counters.activation_bytes, report.breakdown.activations_bytes);
        assert_eq!(counters.output_bytes, report.breakdown.output_buffer_bytes);
        assert_eq!(model.trained_scalars(), report.trained_params);
        assert_eq!(model.params.total_scalars(), report.loaded_params);
        // Two exits → summed mean cross-entropies.
        assert_eq!(step.exit_losses.len(), 2);
        assert!((step.loss - (step.exit_losses[0] + step.exit_losses[1])).abs() < 1e-12);
    }

    #[test]
    fn invalid_batches_are_rejected() {
        let dims = ModelDims::from_arch(&tiny_arch());
        let model = Model::<f64>::init(dims, Variant::full(), vec![2], 47).unwrap();
        // Token grid length mismatch.
        let bad = Batch {
            batch: 1,
            ctx: 8,
            inputs: vec![0; 7],
            targets: vec![0; 8],
        };
        assert!(model.forward_loss(&bad).is_err());
        // Token id outside the vocabulary.
        let bad = Batch {
            batch: 1,
            ctx: 8,
            inputs: vec![255; 8],
            targets: vec![0; 8],
        };
        assert!(model.forward_loss(&bad).is_err());
        // Sequence longer than the trained context.
        let bad = toy_batch(1, 64, dims.vocab, 10);
        assert!(model.forward_loss(&bad).is_err());
    }
}
