//! The five subcommands: pretrain, cost, select, run, report.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use flift_core::arch::assign_devices;
use flift_core::cost::{scheme_cost, Scheme};
use flift_core::data::{
    gen_synth_classification, lm_batch, partition_constraint_correlated, partition_dirichlet,
    partition_equal, tokenize_char, LabeledExample, CHAR_TABLE,
};
use flift_core::fedsim::{
    aggregate_summaries, metrics_to_csv, plan_run, run_experiment, FLDataset, FLRunConfig,
    RunPlan, RunSummary,
};
use flift_core::nn::{checkpoint, cosine_lr, AdamW, Counters, Model, ModelDims, Variant};
use flift_core::rng::Splitter;
use flift_core::selection::select_architecture;
use flift_core::{Error, Result};

use crate::config::{ExperimentConfig, PartitionKind, TaskKind};
use crate::out::{save_checkpoint_atomic, write_atomic};

const PRETRAIN_TAG: u64 = 0x70726574;

fn read_text(path: &Path, key: &str) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::config(format!("key `{key}`: cannot read {}: {e}", path.display())))
}

fn checkpoint_path(dir: &Path, layers: usize) -> PathBuf {
    dir.join(format!("pretrained_l{layers}.flft"))
}

/// Centrally trains every configured architecture on the pretraining
/// corpus (embeddings included) and writes one checkpoint per model.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let archs = cfg.require_archs()?;
    let p = &cfg.pretrain;
    let corpus = p
        .corpus
        .as_ref()
        .ok_or_else(|| Error::config("missing key `pretrain.corpus`"))?;
    let tokens = tokenize_char(&read_text(corpus, "pretrain.corpus")?);
    let seed = cfg.seeds[0];

    for arch in archs {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= arch.vocab) {
            return Err(Error::config(format!(
                "key `pretrain.corpus`: token id {t} exceeds the model vocabulary {}",
                arch.vocab
            )));
        }
        let ctx = p.context.unwrap_or(arch.context);
        if ctx > arch.context {
            return Err(Error::config(format!(
                "key `pretrain.context`: {ctx} exceeds the model context {}",
                arch.context
            )));
        }
        let mut rng = Splitter::new(seed)
            .derive(&[PRETRAIN_TAG, arch.layers as u64])
            .rng();
        let model_seed: u64 = rand::Rng::random(&mut rng);
        let mut model = Model::<f32>::init(
            ModelDims::from_arch(arch),
            Variant::Plain {
                first_trained: 0,
                train_embeddings: true,
            },
            vec![arch.layers],
            model_seed,
        )?;
        let mut opt = AdamW::new(cfg.optimizer);
        let mut first_loss = f64::NAN;
        let mut last_loss = f64::NAN;
        for step in 0..p.steps {
            let lr = cosine_lr(step, p.steps, p.lr, p.lr_end);
            let batch = lm_batch(&tokens, p.batch, ctx, &mut rng)?;
            let mut counters = Counters::default();
            let result = model.train_step(&batch, 0.0, &mut rng, &mut counters)?;
            if !result.loss.is_finite() {
                return Err(Error::numerical(format!(
                    "pretraining loss diverged at step {step} (l={})",
                    arch.layers
                )));
            }
            opt.step(&mut model.params, &result.grads, lr)?;
            if step == 0 {
                first_loss = result.loss;
            }
            last_loss = result.loss;
            if (step + 1) % p.log_every == 0 {
                println!(
                    "pretrain l={} step {}/{} loss {:.4} lr {:.3e}",
                    arch.layers,
                    step + 1,
                    p.steps,
                    result.loss,
                    lr
                );
            }
        }
        let path = checkpoint_path(&cfg.out, arch.layers);
        save_checkpoint_atomic(&path, arch, &model.params)?;
        if p.steps == 0 {
            println!(
                "pretrain l={}: wrote random initialization to {}",
                arch.layers,
                path.display()
            );
        } else {
            println!(
                "pretrain l={}: loss {:.4} -> {:.4} over {} steps, wrote {}",
                arch.layers,
                first_loss,
                last_loss,
                p.steps,
                path.display()
            );
        }
    }
    Ok(())
}

/// Writes one resource-cost CSV per architecture covering the
/// configured scheme/knob grid.
pub fn cmd_cost(cfg: &ExperimentConfig) -> Result<()> {
    let archs = cfg.require_archs()?;
    let shape = cfg.require_shape()?;
    for arch in archs {
        let mut csv = String::from(
            "scheme,knob,t_or_rank,params_B,gradsopt_B,activations_B,output_B,peak_B,upload_B,flops\n",
        );
        let mut push = |scheme: &str, knob: &str, value: &dyn std::fmt::Display, s: Scheme| -> Result<()> {
            let report = scheme_cost(arch, &s, &shape)?;
            csv.push_str(&format!(
                "{scheme},{knob},{value},{},{},{},{},{},{},{}\n",
                report.breakdown.params_bytes,
                report.breakdown.grads_optimizer_bytes,
                report.breakdown.activations_bytes,
                report.breakdown.output_buffer_bytes,
                report.resource.memory_bytes,
                report.resource.upload_bytes,
                report.resource.flops,
            ));
            Ok(())
        };

        let ts = cfg
            .cost
            .layerft_t
            .clone()
            .unwrap_or_else(|| (1..=arch.layers).collect());
        for t in ts {
            if t < 1 || t > arch.layers {
                return Err(Error::config(format!(
                    "key `cost.layerft_t`: t={t} out of range [1, {}]",
                    arch.layers
                )));
            }
            push("layerft", "t", &t, Scheme::LayerFt { trained_layers: t })?;
        }
        for &z in &cfg.cost.lora_rank {
            push("lora", "rank", &z, Scheme::Lora { rank: z })?;
        }
        for &s in &cfg.cost.subset_scale {
            push("subset", "scale", &s, Scheme::Subset { scale: s })?;
        }
        for &z in &cfg.cost.lowrank_rank {
            push("lowrank", "rank", &z, Scheme::LowRank { rank: z })?;
        }
        let exits = match &cfg.cost.exit_layer {
            Some(list) => list.clone(),
            None if arch.layers >= 2 => vec![(arch.layers / 2).max(1)],
            None => Vec::new(),
        };
        for e in exits {
            push(
                "earlyexit",
                "exit_weak",
                &e,
                Scheme::EarlyExit {
                    exit_layer: e,
                    strong: false,
                },
            )?;
            push(
                "earlyexit",
                "exit_strong",
                &e,
                Scheme::EarlyExit {
                    exit_layer: e,
                    strong: true,
                },
            )?;
        }
        let path = cfg.out.join(format!("{}_cost_l{}.csv", cfg.name, arch.layers));
        write_atomic(&path, &csv)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Resolves the constraint scenario to concrete devices and picks the
/// architecture and per-device trained layers; writes the result as JSON.
pub fn cmd_select(cfg: &ExperimentConfig) -> Result<()> {
    let archs = cfg.require_archs()?;
    let scenario = cfg.require_scenario()?;
    let shape = cfg.require_shape()?;
    let seed = cfg.seeds[0];
    let profiles = assign_devices(scenario, seed)?;
    let constraints: Vec<_> = profiles.iter().map(|p| p.constraint).collect();
    let result = select_architecture(archs, &constraints, &shape)?;
    let doc = json!({
        "arch_index": result.arch_index,
        "arch": result.arch,
        "per_device_t": result.per_device_t,
        "average_t": result.average_t,
        "feasible": result.feasible,
        "seed": seed,
    });
    let path = cfg.out.join(format!("{}_selection.json", cfg.name));
    write_atomic(&path, &format!("{:#}\n", doc))?;
    println!(
        "selected l={} (average t {:.3}, {} feasible of {}), wrote {}",
        result.arch.layers,
        result.average_t,
        result.feasible.len(),
        archs.len(),
        path.display()
    );
    Ok(())
}

fn build_dataset(
    cfg: &ExperimentConfig,
    plan: &RunPlan,
    total_devices: usize,
) -> Result<FLDataset> {
    let shape = cfg.require_shape()?;
    match cfg.data.task {
        TaskKind::NextToken => {
            let corpus = cfg
                .data
                .corpus
                .as_ref()
                .ok_or_else(|| Error::config("missing key `data.corpus`"))?;
            let tokens = tokenize_char(&read_text(corpus, "data.corpus")?);
            if let Some(&t) = tokens.iter().find(|&&t| t as usize >= plan.arch.vocab) {
                return Err(Error::config(format!(
                    "key `data.corpus`: token id {t} exceeds the model vocabulary {}",
                    plan.arch.vocab
                )));
            }
            let eval_len = ((tokens.len() as f64 * cfg.data.eval_fraction) as usize)
                .max(shape.context + 1);
            if eval_len >= tokens.len() {
                return Err(Error::config(format!(
                    "key `data.corpus`: {} tokens are too few for an evaluation split of {eval_len}",
                    tokens.len()
                )));
            }
            let split = tokens.len() - eval_len;
            Ok(FLDataset::NextToken {
                shards: partition_equal(&tokens[..split], total_devices)?,
                eval: tokens[split..].to_vec(),
            })
        }
        TaskKind::Classification => {
            let num_classes = cfg
                .data
                .num_classes
                .ok_or_else(|| Error::config("missing key `data.num_classes`"))?;
            let per_class = cfg
                .data
                .examples_per_class
                .ok_or_else(|| Error::config("missing key `data.examples_per_class`"))?;
            if plan.arch.vocab < CHAR_TABLE {
                return Err(Error::config(format!(
                    "classification label tokens need vocab {CHAR_TABLE}, model has {}",
                    plan.arch.vocab
                )));
            }
            let examples =
                gen_synth_classification(num_classes, per_class, shape.context, cfg.data.data_seed)?;
            let eval_per = ((per_class as f64 * cfg.data.eval_fraction).round() as usize)
                .clamp(1, per_class.saturating_sub(1).max(1));
            if eval_per >= per_class {
                return Err(Error::config(
                    "key `data.examples_per_class`: too few examples to hold out an evaluation split",
                ));
            }
            let mut train = Vec::new();
            let mut eval = Vec::new();
            for class in 0..num_classes {
                let block = &examples[class * per_class..(class + 1) * per_class];
                train.extend_from_slice(&block[..per_class - eval_per]);
                eval.extend_from_slice(&block[per_class - eval_per..]);
            }
            let labels: Vec<usize> = train.iter().map(|e| e.label).collect();

            let (index_shards, weak_distribution) = match cfg.data.partition {
                PartitionKind::Dirichlet => (
                    partition_dirichlet(
                        &labels,
                        num_classes,
                        total_devices,
                        cfg.data.alpha,
                        cfg.data.data_seed,
                    )?,
                    None,
                ),
                PartitionKind::Correlated => {
                    let weak_group = cfg.data.weak_group;
                    let groups: Vec<usize> =
                        (0..total_devices).map(|d| plan.device_group(d)).collect();
                    let distinct: std::collections::BTreeSet<_> = groups.iter().copied().collect();
                    if distinct.len() != 2 {
                        return Err(Error::config(format!(
                            "key `data.partition`: correlated needs exactly 2 constraint groups, scenario has {}",
                            distinct.len()
                        )));
                    }
                    if !distinct.contains(&weak_group) {
                        return Err(Error::config(format!(
                            "key `data.weak_group`: group {weak_group} does not exist in the scenario"
                        )));
                    }
                    let weak: Vec<usize> = (0..total_devices)
                        .filter(|&d| groups[d] == weak_group)
                        .collect();
                    let strong: Vec<usize> = (0..total_devices)
                        .filter(|&d| groups[d] != weak_group)
                        .collect();
                    let (shards, p_weak) = partition_constraint_correlated(
                        &labels,
                        num_classes,
                        [&weak, &strong],
                        cfg.data.alpha,
                        cfg.data.data_seed,
                    )?;
                    (shards, Some(p_weak))
                }
                PartitionKind::Equal => unreachable!("rejected when the config was bound"),
            };
            if let Some(empty) = index_shards.iter().position(|s| s.is_empty()) {
                return Err(Error::config(format!(
                    "device {empty} received no examples under this partition; raise `data.examples_per_class` or change `data.data_seed`"
                )));
            }
            let shards: Vec<Vec<LabeledExample>> = index_shards
                .into_iter()
                .map(|ids| ids.into_iter().map(|i| train[i].clone()).collect())
                .collect();
            Ok(FLDataset::Classification {
                shards,
                eval,
                num_classes,
                weak_distribution,
            })
        }
    }
}

/// Executes one federated run per seed: plans roles, loads the selected
/// architecture's checkpoint, runs all rounds, and writes the metrics
/// CSV, summary JSON, and final checkpoint.
pub fn cmd_run(cfg: &ExperimentConfig, parallel_seeds: bool) -> Result<()> {
    let archs = cfg.require_archs()?.to_vec();
    let scenario = cfg.require_scenario()?.clone();
    let strategy = cfg.require_strategy()?.clone();
    let fed = cfg.require_federation()?.clone();
    let shape = cfg.require_shape()?;
    let lr = cfg.require_lr()?;

    let run_one = |seed: u64| -> Result<String> {
        let flcfg = FLRunConfig {
            strategy: strategy.clone(),
            rounds: fed.rounds,
            total_devices: scenario.total_devices,
            clients_per_round: fed.clients_per_round,
            shape,
            lr,
            seed,
            eval_every: fed.eval_every,
            optimizer: cfg.optimizer,
        };
        let plan = plan_run(&flcfg, &archs, &scenario)?;
        let dataset = build_dataset(cfg, &plan, scenario.total_devices)?;
        let ck_path = checkpoint_path(&cfg.checkpoints(), plan.arch.layers);
        let (ck_arch, pretrained) = checkpoint::load(&ck_path).map_err(|e| {
            Error::config(format!(
                "cannot load checkpoint {}: {e} (run `flift pretrain` first)",
                ck_path.display()
            ))
        })?;
        if ck_arch != plan.arch {
            return Err(Error::config(format!(
                "checkpoint {} holds a different architecture than the planned one (l={})",
                ck_path.display(),
                plan.arch.layers
            )));
        }
        let result = run_experiment(&flcfg, &plan, &pretrained, &dataset)?;

        let base = cfg.out.join(format!("{}_seed{seed}", cfg.name));
        write_atomic(
            &base.with_extension("csv"),
            &metrics_to_csv(&result.metrics),
        )?;
        save_checkpoint_atomic(&base.with_extension("flft"), &result.arch, &result.final_params)?;
        let summary = result.summary();
        let summary_text = serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::format(format!("summary serialization: {e}")))?;
        write_atomic(&base.with_extension("json"), &format!("{summary_text}\n"))?;

        let last = result.metrics.last().expect("runs always evaluate at the end");
        Ok(format!(
            "seed {seed}: l={} rounds {} loss {:.4} acc {:.4} upload {} B flops {} -> {}",
            result.arch.layers,
            fed.rounds,
            last.loss,
            last.accuracy,
            last.upload_cum_bytes,
            last.flops_cum,
            base.with_extension("csv").display()
        ))
    };

    let lines: Result<Vec<String>> = if parallel_seeds {
        use rayon::prelude::*;
        cfg.seeds.par_iter().map(|&s| run_one(s)).collect()
    } else {
        cfg.seeds.iter().map(|&s| run_one(s)).collect()
    };
    for line in lines? {
        println!("{line}");
    }
    Ok(())
}

/// Aggregates per-seed run summaries into mean ± standard deviation.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<()> {
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let mut summaries = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let path = cfg.out.join(format!("{}_seed{seed}.json", cfg.name));
        let text = fs::read_to_string(&path).map_err(|e| {
            Error::config(format!("cannot read run summary {}: {e}", path.display()))
        })?;
        let summary: RunSummary = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        summaries.push(summary);
    }
    let stats = aggregate_summaries(&summaries)?;
    let doc = json!({
        "name": cfg.name,
        "seeds": seeds,
        "runs": stats.runs,
        "mean_acc": stats.mean_acc,
        "std_acc": stats.std_acc,
        "mean_loss": stats.mean_loss,
        "std_loss": stats.std_loss,
    });
    let path = cfg.out.join(format!("{}_report.json", cfg.name));
    write_atomic(&path, &format!("{:#}\n", doc))?;
    println!(
        "{} over {} seeds: acc {:.4} ± {:.4}, loss {:.4} ± {:.4}, wrote {}",
        cfg.name,
        stats.runs,
        stats.mean_acc,
        stats.std_acc,
        stats.mean_loss,
        stats.std_loss,
        path.display()
    );
    Ok(())
}
