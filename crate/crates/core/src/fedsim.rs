//! Round-based federated orchestrator: seeded device sampling,
//! broadcast, (optionally parallel) local training, aggregation,
//! periodic evaluation, and a strict resource ledger.
//!
//! Determinism contract: (config, seed) fully determines every metric
//! bitwise. Device sampling draws from a stream derived from
//! (seed, round); each client trains from a stream derived from
//! (seed, round, client id); merges consume contributions in ascending
//! client-id order; evaluation is a pure pass over a fixed split. The
//! ledger records the cost model's per-client predictions and asserts
//! on every executed round that uploads match them exactly and that
//! measured compute never exceeds them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureDescriptor, ConstraintScenario, DeviceProfile};
use crate::cost::{scheme_cost, ResourceCost, Scheme, TrainingShape};
use crate::data::{classification_batch, label_token_base, lm_batch, LabeledExample};
use crate::error::{Error, Result};
use crate::nn::{Model, ModelDims, OptimizerSpec, ParamStore, Variant};
use crate::rng::Splitter;
use crate::selection::{select_architecture, SelectionResult};
use crate::strategies::{
    aggregate_depthfl, aggregate_fedhm, aggregate_hetlora, aggregate_layerft, aggregate_subset,
    depthfl_server_init, fedhm_factorize_for_ranks, fedrolex_subset, fjord_feasible_levels,
    hetlora_server_init, heterofl_subset, local_train_depthfl, local_train_fedhm,
    local_train_fjord, local_train_hetlora, local_train_layerft, local_train_subset,
    max_feasible_adapter_rank, max_feasible_factor_rank, max_feasible_width_level,
    mean_cross_entropy, AggregationState, LocalOutcome, LocalSetup,
};
use crate::tensor::{Scalar, Tensor};

const SAMPLE_TAG: u64 = 0x73616d70;
const CLIENT_TAG: u64 = 0x636c6e74;

/// Which aggregation scheme a run uses, with its server-side knobs.
#[derive(Clone, Debug, PartialEq)]
pub enum StrategyConfig {
    /// Architecture selection plus last-t-layer finetuning.
    LayerFt,
    /// Nested low-rank adapters; each device trains the largest rank
    /// it can afford, up to the server cap.
    HetLora { max_rank: usize },
    /// Static leading width subsets at per-device scales.
    HeteroFl { levels: Vec<f64> },
    /// Per-mini-batch width switching among the device's feasible scales.
    Fjord { levels: Vec<f64> },
    /// Rolling width windows that advance every round.
    FedRolex { levels: Vec<f64> },
    /// Server-side factorization into rank pairs; the least constrained
    /// devices train unfactorized.
    FedHm { max_rank: usize },
    /// Early-exit depth scaling with one auxiliary classifier.
    DepthFl { exit_layer: usize },
}

impl StrategyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyConfig::LayerFt => "layerft",
            StrategyConfig::HetLora { .. } => "hetlora",
            StrategyConfig::HeteroFl { .. } => "heterofl",
            StrategyConfig::Fjord { .. } => "fjord",
            StrategyConfig::FedRolex { .. } => "fedrolex",
            StrategyConfig::FedHm { .. } => "fedhm",
            StrategyConfig::DepthFl { .. } => "depthfl",
        }
    }
}

/// Everything a federated run needs besides the data and weights.
#[derive(Clone, Debug)]
pub struct FLRunConfig {
    pub strategy: StrategyConfig,
    /// Total communication rounds R.
    pub rounds: usize,
    /// Device population size |C|.
    pub total_devices: usize,
    /// Devices sampled per round.
    pub clients_per_round: usize,
    /// Mini-batch rows, context length, and local steps per round.
    pub shape: TrainingShape,
    pub lr: f64,
    pub seed: u64,
    /// Evaluate every this many rounds (and always at round 0 and R).
    pub eval_every: usize,
    pub optimizer: OptimizerSpec,
}

impl FLRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::config("rounds must be >= 1"));
        }
        if self.clients_per_round < 1 || self.clients_per_round > self.total_devices {
            return Err(Error::config(format!(
                "clients_per_round {} must lie in [1, {}]",
                self.clients_per_round, self.total_devices
            )));
        }
        if self.eval_every < 1 {
            return Err(Error::config("eval_every must be >= 1"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::config("learning rate must be finite and >= 0"));
        }
        match &self.strategy {
            StrategyConfig::HeteroFl { levels }
            | StrategyConfig::Fjord { levels }
            | StrategyConfig::FedRolex { levels } => {
                if levels.is_empty() {
                    return Err(Error::config("width level list is empty"));
                }
            }
            StrategyConfig::HetLora { max_rank } | StrategyConfig::FedHm { max_rank }
                if *max_rank < 1 =>
            {
                return Err(Error::config("max_rank must be >= 1"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Client-side data plus the held-out split the server evaluates on.
#[derive(Clone, Debug)]
pub enum FLDataset {
    /// Next-token prediction over per-client token streams.
    NextToken { shards: Vec<Vec<u32>>, eval: Vec<u32> },
    /// Sequence classification via a label token at the final position.
    Classification {
        shards: Vec<Vec<LabeledExample>>,
        eval: Vec<LabeledExample>,
        num_classes: usize,
        /// Class-occurrence distribution for the weighted F1 column
        /// (the weak group's distribution under constraint-correlated
        /// partitioning). When absent, the eval split's empirical label
        /// distribution is used.
        weak_distribution: Option<Vec<f64>>,
    },
}

impl FLDataset {
    fn num_shards(&self) -> usize {
        match self {
            FLDataset::NextToken { shards, .. } => shards.len(),
            FLDataset::Classification { shards, .. } => shards.len(),
        }
    }
}

/// One evaluation row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Per-class F1 (token classes for next-token runs).
    pub f1: Vec<f64>,
    pub f1_macro: f64,
    pub f1_weak: f64,
    pub upload_cum_bytes: u64,
    pub flops_cum: u64,
}

/// Output of a finished run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub metrics: Vec<MetricsRecord>,
    pub final_params: ParamStore<f32>,
    pub arch: ArchitectureDescriptor,
}

impl RunResult {
    pub fn summary(&self) -> RunSummary {
        let last = self.metrics.last().expect("runs always evaluate at round R");
        RunSummary {
            final_acc: last.accuracy,
            final_loss: last.loss,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_acc: f64,
    pub final_loss: f64,
}

/// Mean and population standard deviation across per-seed summaries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub runs: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_loss: f64,
    pub std_loss: f64,
}

pub fn aggregate_summaries(items: &[RunSummary]) -> Result<SummaryStats> {
    if items.is_empty() {
        return Err(Error::config("no run summaries to aggregate"));
    }
    let n = items.len() as f64;
    let mean_acc = items.iter().map(|s| s.final_acc).sum::<f64>() / n;
    let mean_loss = items.iter().map(|s| s.final_loss).sum::<f64>() / n;
    let var = |f: &dyn Fn(&RunSummary) -> f64, mean: f64| {
        items.iter().map(|s| (f(s) - mean).powi(2)).sum::<f64>() / n
    };
    Ok(SummaryStats {
        runs: items.len(),
        mean_acc,
        std_acc: var(&|s| s.final_acc, mean_acc).sqrt(),
        mean_loss,
        std_loss: var(&|s| s.final_loss, mean_loss).sqrt(),
    })
}

pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("round,loss,acc,f1_macro,f1_weak,upload_cum_B,flops_cum\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.round, r.loss, r.accuracy, r.f1_macro, r.f1_weak, r.upload_cum_bytes, r.flops_cum
        ));
    }
    out
}

/// Uniform sample of `per_round` device ids without replacement, drawn
/// from a stream derived from (seed, round); returned ascending.
pub fn sample_devices(
    total: usize,
    per_round: usize,
    seed: u64,
    round: usize,
) -> Result<Vec<usize>> {
    if per_round < 1 || per_round > total {
        return Err(Error::config(format!(
            "cannot sample {per_round} of {total} devices"
        )));
    }
    let mut rng = Splitter::new(seed)
        .derive(&[SAMPLE_TAG, round as u64])
        .rng();
    let mut ids: Vec<usize> = (0..total).collect();
    for k in 0..per_round {
        let j = rng.random_range(k..total);
        ids.swap(k, j);
    }
    let mut picked = ids[..per_round].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Per-class F1 = 2TP / (2TP + FP + FN), defined as 0 when the
/// denominator vanishes.
pub fn f1_per_class(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<f64>> {
    if predictions.len() != labels.len() {
        return Err(Error::config(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut tp = vec![0u64; num_classes];
    let mut fp = vec![0u64; num_classes];
    let mut fnn = vec![0u64; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(Error::config(format!(
                "class id out of range: prediction {p}, label {l}, {num_classes} classes"
            )));
        }
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fnn[l] += 1;
        }
    }
    Ok((0..num_classes)
        .map(|k| {
            let denom = 2 * tp[k] + fp[k] + fnn[k];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[k] as f64 / denom as f64
            }
        })
        .collect())
}

/// Σ_k p(k) · F1_k over a class-occurrence distribution.
pub fn weak_weighted_f1(f1: &[f64], distribution: &[f64]) -> Result<f64> {
    if f1.len() != distribution.len() {
        return Err(Error::config(format!(
            "{} F1 values vs {} weights",
            f1.len(),
            distribution.len()
        )));
    }
    let sum: f64 = distribution.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::config(format!(
            "class distribution sums to {sum}, expected 1"
        )));
    }
    Ok(f1.iter().zip(distribution).map(|(f, p)| f * p).sum())
}

fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let cols = logits.cols();
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0usize;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Mean next-token cross entropy and per-token top-1 accuracy over a
/// held-out stream, tiled into non-overlapping context windows. Pure:
/// no dropout, no parameter mutation.
pub fn evaluate_next_token<S: Scalar>(
    model: &Model<S>,
    tokens: &[u32],
    ctx: usize,
    batch: usize,
) -> Result<(f64, f64)> {
    if tokens.len() < ctx + 1 {
        return Err(Error::config(
            "evaluation stream shorter than one context window",
        ));
    }
    let windows = (tokens.len() - 1) / ctx;
    let mut loss_sum = 0.0f64;
    let mut correct = 0u64;
    let mut seen = 0u64;
    let mut w = 0usize;
    while w < windows {
        let take = batch.min(windows - w);
        let mut inputs = Vec::with_capacity(take * ctx);
        let mut targets = Vec::with_capacity(take * ctx);
        for k in w..w + take {
            let start = k * ctx;
            inputs.extend_from_slice(&tokens[start..start + ctx]);
            targets.extend_from_slice(&tokens[start + 1..start + ctx + 1]);
        }
        let logits = model.forward_eval(take, ctx, &inputs)?;
        loss_sum += mean_cross_entropy(&logits, &targets)? * (take * ctx) as f64;
        for (pred, &target) in argmax_rows(&logits).iter().zip(&targets) {
            if *pred == target as usize {
                correct += 1;
            }
        }
        seen += (take * ctx) as u64;
        w += take;
    }
    Ok((loss_sum / seen as f64, correct as f64 / seen as f64))
}

/// Sequence-level evaluation for the classification task: loss is the
/// full next-token cross entropy (the training objective); predictions
/// take the final position's argmax restricted to the label tokens.
pub fn evaluate_classification<S: Scalar>(
    model: &Model<S>,
    examples: &[LabeledExample],
    num_classes: usize,
    ctx: usize,
    batch: usize,
) -> Result<(f64, Vec<usize>, Vec<usize>)> {
    if examples.is_empty() {
        return Err(Error::config("empty classification evaluation split"));
    }
    let base = label_token_base(num_classes) as usize;
    let ids: Vec<usize> = (0..examples.len()).collect();
    let mut preds = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    let mut loss_sum = 0.0f64;
    let mut positions = 0u64;
    for chunk in ids.chunks(batch) {
        let b = classification_batch(examples, chunk, num_classes, ctx)?;
        let logits = model.forward_eval(b.batch, b.ctx, &b.inputs)?;
        loss_sum += mean_cross_entropy(&logits, &b.targets)? * (b.batch * b.ctx) as f64;
        positions += (b.batch * b.ctx) as u64;
        let cols = logits.cols();
        for (i, &id) in chunk.iter().enumerate() {
            let last = (i + 1) * b.ctx - 1;
            let row = &logits.data()[last * cols..(last + 1) * cols];
            let mut best = 0usize;
            for k in 1..num_classes {
                if row[base + k] > row[base + best] {
                    best = k;
                }
            }
            preds.push(best);
            labels.push(examples[id].label);
        }
    }
    Ok((loss_sum / positions as f64, preds, labels))
}

/// What one device does when sampled.
#[derive(Clone, Debug)]
enum ClientRole {
    Depth { trained_layers: usize },
    Adapter { rank: usize },
    StaticWidth { scale: f64 },
    RollingWidth { scale: f64 },
    SwitchingWidth { levels: Vec<f64>, s_max: f64 },
    Factor { rank: Option<usize> },
    Exit { strong: bool },
}

#[derive(Clone, Debug)]
struct DevicePlan {
    profile: DeviceProfile,
    role: ClientRole,
    predicted: ResourceCost,
}

/// The feasibility-checked execution plan: the chosen architecture and
/// one role per device. All infeasibility errors surface here, before
/// any round executes.
#[derive(Clone, Debug)]
pub struct RunPlan {
    pub arch_index: usize,
    pub arch: ArchitectureDescriptor,
    /// Present for the architecture-selection strategy.
    pub selection: Option<SelectionResult>,
    plans: Vec<DevicePlan>,
}

impl RunPlan {
    /// Per-device predicted cost, indexed by device id.
    pub fn predicted_cost(&self, device: usize) -> ResourceCost {
        self.plans[device].predicted
    }

    /// Constraint-group index the scenario assigned to a device.
    pub fn device_group(&self, device: usize) -> usize {
        self.plans[device].profile.group
    }
}

fn largest_arch(archs: &[ArchitectureDescriptor]) -> Result<usize> {
    (0..archs.len())
        .max_by_key(|&i| {
            let a = &archs[i];
            (a.layers, a.embed_dim, a.ffn_mult, a.vocab)
        })
        .ok_or_else(|| Error::config("empty architecture list"))
}

/// Resolves per-device roles for the configured strategy, verifying
/// every device can afford its assignment.
pub fn plan_run(
    config: &FLRunConfig,
    archs: &[ArchitectureDescriptor],
    scenario: &ConstraintScenario,
) -> Result<RunPlan> {
    config.validate()?;
    if scenario.total_devices != config.total_devices {
        return Err(Error::config(format!(
            "scenario covers {} devices, config expects {}",
            scenario.total_devices, config.total_devices
        )));
    }
    let profiles = crate::arch::assign_devices(scenario, config.seed)?;
    let shape = config.shape;

    let (arch_index, selection) = match &config.strategy {
        StrategyConfig::LayerFt => {
            let constraints: Vec<_> = profiles.iter().map(|p| p.constraint).collect();
            let result = select_architecture(archs, &constraints, &shape)?;
            (result.arch_index, Some(result))
        }
        _ => (largest_arch(archs)?, None),
    };
    let arch = archs[arch_index];

    let mut plans = Vec::with_capacity(profiles.len());
    for profile in &profiles {
        let infeasible = |what: &str| {
            Error::infeasible(format!(
                "device {} (group {}) cannot run any {what} within its budget",
                profile.id, profile.group
            ))
        };
        let (role, scheme) = match &config.strategy {
            StrategyConfig::LayerFt => {
                let t = selection.as_ref().unwrap().per_device_t[profile.id];
                (
                    ClientRole::Depth { trained_layers: t },
                    Scheme::LayerFt { trained_layers: t },
                )
            }
            StrategyConfig::HetLora { max_rank } => {
                let z = max_feasible_adapter_rank(&arch, &profile.constraint, &shape, *max_rank)
                    .ok_or_else(|| infeasible("adapter rank"))?;
                (ClientRole::Adapter { rank: z }, Scheme::Lora { rank: z })
            }
            StrategyConfig::HeteroFl { levels } => {
                let s = max_feasible_width_level(&arch, &profile.constraint, &shape, levels)
                    .ok_or_else(|| infeasible("width level"))?;
                (
                    ClientRole::StaticWidth { scale: s },
                    Scheme::Subset { scale: s },
                )
            }
            StrategyConfig::FedRolex { levels } => {
                let s = max_feasible_width_level(&arch, &profile.constraint, &shape, levels)
                    .ok_or_else(|| infeasible("width level"))?;
                (
                    ClientRole::RollingWidth { scale: s },
                    Scheme::Subset { scale: s },
                )
            }
            StrategyConfig::Fjord { levels } => {
                let s_max = max_feasible_width_level(&arch, &profile.constraint, &shape, levels)
                    .ok_or_else(|| infeasible("width level"))?;
                let feasible = fjord_feasible_levels(levels, s_max)?;
                (
                    ClientRole::SwitchingWidth {
                        levels: feasible,
                        s_max,
                    },
                    Scheme::Subset { scale: s_max },
                )
            }
            StrategyConfig::FedHm { max_rank } => {
                let full = Scheme::LayerFt {
                    trained_layers: arch.layers,
                };
                let affords_full = scheme_cost(&arch, &full, &shape)?
                    .resource
                    .fits(&profile.constraint);
                if affords_full {
                    (ClientRole::Factor { rank: None }, full)
                } else {
                    let z = max_feasible_factor_rank(&arch, &profile.constraint, &shape, *max_rank)
                        .ok_or_else(|| infeasible("factor rank"))?;
                    (
                        ClientRole::Factor { rank: Some(z) },
                        Scheme::LowRank { rank: z },
                    )
                }
            }
            StrategyConfig::DepthFl { exit_layer } => {
                let strong = Scheme::EarlyExit {
                    exit_layer: *exit_layer,
                    strong: true,
                };
                let weak = Scheme::EarlyExit {
                    exit_layer: *exit_layer,
                    strong: false,
                };
                if scheme_cost(&arch, &strong, &shape)?
                    .resource
                    .fits(&profile.constraint)
                {
                    (ClientRole::Exit { strong: true }, strong)
                } else if scheme_cost(&arch, &weak, &shape)?
                    .resource
                    .fits(&profile.constraint)
                {
                    (ClientRole::Exit { strong: false }, weak)
                } else {
                    return Err(infeasible("exit role"));
                }
            }
        };
        let predicted = scheme_cost(&arch, &scheme, &shape)?.resource;
        if !predicted.fits(&profile.constraint) {
            return Err(infeasible("assigned configuration"));
        }
        plans.push(DevicePlan {
            profile: *profile,
            role,
            predicted,
        });
    }
    Ok(RunPlan {
        arch_index,
        arch,
        selection,
        plans,
    })
}

fn strategy_eval_shape(
    strategy: &StrategyConfig,
    arch: &ArchitectureDescriptor,
) -> (Variant, Vec<usize>) {
    match strategy {
        StrategyConfig::HetLora { max_rank } => {
            (Variant::Lora { rank: *max_rank }, vec![arch.layers])
        }
        StrategyConfig::DepthFl { exit_layer } => {
            (Variant::full(), vec![*exit_layer, arch.layers])
        }
        _ => (Variant::full(), vec![arch.layers]),
    }
}

fn eval_model(
    strategy: &StrategyConfig,
    arch: &ArchitectureDescriptor,
    global: &ParamStore<f32>,
) -> Result<Model<f32>> {
    let (variant, exits) = strategy_eval_shape(strategy, arch);
    let mut model = Model::empty(ModelDims::from_arch(arch), variant, exits)?;
    model.params = global.clone();
    Ok(model)
}

fn evaluate(
    config: &FLRunConfig,
    arch: &ArchitectureDescriptor,
    global: &ParamStore<f32>,
    dataset: &FLDataset,
    round: usize,
    upload_cum_bytes: u64,
    flops_cum: u64,
) -> Result<MetricsRecord> {
    let model = eval_model(&config.strategy, arch, global)?;
    let ctx = config.shape.context;
    let batch = config.shape.batch.max(1);
    let (loss, accuracy, per_class) = match dataset {
        FLDataset::NextToken { eval, .. } => {
            let (loss, acc) = evaluate_next_token(&model, eval, ctx, batch)?;
            // Token-class F1 over the same fixed windows.
            let windows = (eval.len() - 1) / ctx;
            let mut preds = Vec::new();
            let mut labels = Vec::new();
            let mut w = 0usize;
            while w < windows {
                let take = batch.min(windows - w);
                let mut inputs = Vec::with_capacity(take * ctx);
                for k in w..w + take {
                    inputs.extend_from_slice(&eval[k * ctx..k * ctx + ctx]);
                }
                let logits = model.forward_eval(take, ctx, &inputs)?;
                preds.extend(argmax_rows(&logits));
                for k in w..w + take {
                    labels.extend(eval[k * ctx + 1..k * ctx + ctx + 1].iter().map(|&t| t as usize));
                }
                w += take;
            }
            let f1 = f1_per_class(&preds, &labels, arch.vocab)?;
            (loss, acc, (f1, empirical_distribution(&labels, arch.vocab)))
        }
        FLDataset::Classification {
            eval,
            num_classes,
            weak_distribution,
            ..
        } => {
            let (loss, preds, labels) =
                evaluate_classification(&model, eval, *num_classes, ctx, batch)?;
            let acc = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64
                / preds.len() as f64;
            let f1 = f1_per_class(&preds, &labels, *num_classes)?;
            let weights = match weak_distribution {
                Some(w) => w.clone(),
                None => empirical_distribution(&labels, *num_classes),
            };
            (loss, acc, (f1, weights))
        }
    };
    let (f1, weights) = per_class;
    if !loss.is_finite() {
        return Err(Error::numerical(format!(
            "evaluation loss is not finite at round {round}"
        )));
    }
    let f1_macro = if f1.is_empty() {
        0.0
    } else {
        f1.iter().sum::<f64>() / f1.len() as f64
    };
    let f1_weak = weak_weighted_f1(&f1, &weights)?;
    Ok(MetricsRecord {
        round,
        loss,
        accuracy,
        f1,
        f1_macro,
        f1_weak,
        upload_cum_bytes,
        flops_cum,
    })
}

fn empirical_distribution(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let total = labels.len() as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}

fn client_round(
    config: &FLRunConfig,
    plan: &RunPlan,
    dataset: &FLDataset,
    global: &ParamStore<f32>,
    factor_stores: &std::collections::BTreeMap<usize, ParamStore<f32>>,
    round: usize,
    device: usize,
) -> Result<LocalOutcome> {
    let device_plan = &plan.plans[device];
    let setup = LocalSetup {
        client: device,
        round,
        steps: config.shape.steps_per_round,
        lr: config.lr,
        optimizer: &config.optimizer,
    };
    let mut rng = Splitter::new(config.seed)
        .derive(&[CLIENT_TAG, round as u64, device as u64])
        .rng();
    let arch = &plan.arch;
    let shape = config.shape;

    let outcome = match dataset {
        FLDataset::NextToken { shards, .. } => {
            let shard = &shards[device];
            let mut batches =
                |rng: &mut ChaCha8Rng| lm_batch(shard, shape.batch, shape.context, rng);
            run_role(
                &device_plan.role,
                global,
                factor_stores,
                arch,
                &config.strategy,
                &setup,
                &mut batches,
                &mut rng,
                round,
            )?
        }
        FLDataset::Classification {
            shards,
            num_classes,
            ..
        } => {
            let shard = &shards[device];
            if shard.is_empty() {
                return Err(Error::config(format!("device {device} has no examples")));
            }
            let mut batches = |rng: &mut ChaCha8Rng| {
                let ids: Vec<usize> = (0..shape.batch)
                    .map(|_| rng.random_range(0..shard.len()))
                    .collect();
                classification_batch(shard, &ids, *num_classes, shape.context)
            };
            run_role(
                &device_plan.role,
                global,
                factor_stores,
                arch,
                &config.strategy,
                &setup,
                &mut batches,
                &mut rng,
                round,
            )?
        }
    };

    // Resource ledger: uploads must match the prediction exactly, and
    // measured compute must never exceed it (it matches it exactly for
    // every deterministic-width role).
    let predicted = device_plan.predicted;
    assert_eq!(
        outcome.update.upload_bytes, predicted.upload_bytes,
        "device {device} uploaded a different payload size than predicted"
    );
    assert!(
        outcome.stats.flops <= predicted.flops,
        "device {device} exceeded its predicted FLOPs"
    );
    assert!(
        outcome.stats.peak_memory_bytes <= predicted.memory_bytes,
        "device {device} exceeded its predicted peak memory"
    );
    if !matches!(device_plan.role, ClientRole::SwitchingWidth { .. }) {
        assert_eq!(
            outcome.stats.flops, predicted.flops,
            "device {device} measured FLOPs diverged from the prediction"
        );
        assert_eq!(
            outcome.stats.peak_memory_bytes, predicted.memory_bytes,
            "device {device} measured peak memory diverged from the prediction"
        );
    }
    Ok(outcome)
}

#[allow(clippy::too_many_arguments)]
fn run_role(
    role: &ClientRole,
    global: &ParamStore<f32>,
    factor_stores: &std::collections::BTreeMap<usize, ParamStore<f32>>,
    arch: &ArchitectureDescriptor,
    strategy: &StrategyConfig,
    setup: &LocalSetup,
    batches: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<crate::nn::Batch>,
    rng: &mut ChaCha8Rng,
    round: usize,
) -> Result<LocalOutcome> {
    match role {
        ClientRole::Depth { trained_layers } => {
            local_train_layerft(global, arch, *trained_layers, setup, batches, rng)
        }
        ClientRole::Adapter { rank } => {
            local_train_hetlora(global, arch, *rank, setup, batches, rng)
        }
        ClientRole::StaticWidth { scale } => {
            let spec = heterofl_subset(arch, *scale)?;
            local_train_subset(global, arch, &spec, setup, batches, rng)
        }
        ClientRole::RollingWidth { scale } => {
            let spec = fedrolex_subset(arch, *scale, round)?;
            local_train_subset(global, arch, &spec, setup, batches, rng)
        }
        ClientRole::SwitchingWidth { levels, s_max } => {
            local_train_fjord(global, arch, levels, *s_max, setup, batches, rng)
        }
        ClientRole::Factor { rank } => {
            let broadcast = match rank {
                Some(z) => factor_stores
                    .get(z)
                    .ok_or_else(|| Error::config(format!("no factor store for rank {z}")))?,
                None => global,
            };
            local_train_fedhm(broadcast, arch, *rank, setup, batches, rng)
        }
        ClientRole::Exit { strong } => {
            let StrategyConfig::DepthFl { exit_layer } = strategy else {
                return Err(Error::config("exit role outside the early-exit strategy"));
            };
            local_train_depthfl(global, arch, *exit_layer, *strong, setup, batches, rng)
        }
    }
}

#[cfg(feature = "parallel")]
fn map_clients<F>(ids: &[usize], f: F) -> Result<Vec<LocalOutcome>>
where
    F: Fn(usize) -> Result<LocalOutcome> + Sync,
{
    use rayon::prelude::*;
    ids.par_iter().map(|&i| f(i)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_clients<F>(ids: &[usize], f: F) -> Result<Vec<LocalOutcome>>
where
    F: Fn(usize) -> Result<LocalOutcome> + Sync,
{
    ids.iter().map(|&i| f(i)).collect()
}

/// Executes the planned run: R rounds of sampling, broadcast, local
/// training, and aggregation, evaluating at round 0, every
/// `eval_every` rounds, and at round R.
pub fn run_experiment(
    config: &FLRunConfig,
    plan: &RunPlan,
    pretrained: &ParamStore<f32>,
    dataset: &FLDataset,
) -> Result<RunResult> {
    config.validate()?;
    if dataset.num_shards() != config.total_devices {
        return Err(Error::config(format!(
            "{} data shards for {} devices",
            dataset.num_shards(),
            config.total_devices
        )));
    }
    if let FLDataset::NextToken { shards, eval } = dataset {
        let need = config.shape.context + 1;
        if eval.len() < need {
            return Err(Error::config("evaluation stream too short"));
        }
        if let Some(short) = shards.iter().position(|s| s.len() < need) {
            return Err(Error::config(format!(
                "device {short}'s shard is shorter than one training window"
            )));
        }
    }

    let arch = plan.arch;
    let mut global = match &config.strategy {
        StrategyConfig::HetLora { max_rank } => {
            hetlora_server_init(pretrained, &arch, *max_rank, config.seed)?
        }
        StrategyConfig::DepthFl { exit_layer } => {
            depthfl_server_init(pretrained, &arch, *exit_layer)?
        }
        _ => pretrained.clone(),
    };

    let mut upload_cum_bytes = 0u64;
    let mut flops_cum = 0u64;
    let mut metrics = vec![evaluate(
        config,
        &arch,
        &global,
        dataset,
        0,
        upload_cum_bytes,
        flops_cum,
    )?];

    for round in 1..=config.rounds {
        let ids = sample_devices(
            config.total_devices,
            config.clients_per_round,
            config.seed,
            round,
        )?;

        // FedHM broadcast: factorize once per distinct participating rank.
        let factor_stores = if matches!(config.strategy, StrategyConfig::FedHm { .. }) {
            let ranks: Vec<usize> = ids
                .iter()
                .filter_map(|&i| match &plan.plans[i].role {
                    ClientRole::Factor { rank: Some(z) } => Some(*z),
                    _ => None,
                })
                .collect();
            fedhm_factorize_for_ranks(&global, &arch, &ranks)?
        } else {
            Default::default()
        };

        let outcomes = map_clients(&ids, |device| {
            client_round(config, plan, dataset, &global, &factor_stores, round, device)
        })?;

        for outcome in &outcomes {
            upload_cum_bytes += outcome.update.upload_bytes;
            flops_cum += plan.plans[outcome.update.client].predicted.flops;
        }

        let updates: Vec<_> = outcomes.into_iter().map(|o| o.update).collect();
        let state = AggregationState::new(round, global);
        let n = config.clients_per_round;
        global = match &config.strategy {
            StrategyConfig::LayerFt => aggregate_layerft(&state, &updates, n)?,
            StrategyConfig::HetLora { max_rank } => {
                aggregate_hetlora(&state, &updates, n, *max_rank)?
            }
            StrategyConfig::HeteroFl { .. }
            | StrategyConfig::Fjord { .. }
            | StrategyConfig::FedRolex { .. } => aggregate_subset(&state, &updates, n)?,
            StrategyConfig::FedHm { .. } => aggregate_fedhm(&state, &updates, n)?,
            StrategyConfig::DepthFl { .. } => aggregate_depthfl(&state, &updates, n)?,
        };

        if round % config.eval_every == 0 || round == config.rounds {
            metrics.push(evaluate(
                config,
                &arch,
                &global,
                dataset,
                round,
                upload_cum_bytes,
                flops_cum,
            )?);
        }
    }

    Ok(RunResult {
        metrics,
        final_params: global,
        arch,
    })
}

/// Convenience wrapper: plan, check feasibility, and execute.
pub fn plan_and_run(
    config: &FLRunConfig,
    archs: &[ArchitectureDescriptor],
    scenario: &ConstraintScenario,
    pretrained: &ParamStore<f32>,
    dataset: &FLDataset,
) -> Result<(RunPlan, RunResult)> {
    let plan = plan_run(config, archs, scenario)?;
    let result = run_experiment(config, &plan, pretrained, dataset)?;
    Ok((plan, result))
}
