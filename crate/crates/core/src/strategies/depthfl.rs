//! Depth-scaled training with an early exit head: weak devices hold
//! only the first `exit_layer` blocks plus an auxiliary classifier at
//! that depth, strong devices hold the whole model and train through
//! both classifiers at once (their losses are summed, unweighted).
//! Every tensor a device holds is trained whole, so aggregation is the
//! plain participation-weighted merge; the served model always predicts
//! from the final head.

use rand_chacha::ChaCha8Rng;

use crate::arch::ArchitectureDescriptor;
use crate::error::{Error, Result};
use crate::nn::{Model, ModelDims, ParamStore, Variant};
use crate::tensor::{Scalar, Tensor};

use super::layerft::aggregate_layerft;
use super::{
    mean_cross_entropy, run_local_steps, trained_payload, AggregationState, BatchSource,
    ClientUpdate, LocalOutcome, LocalSetup, Payload,
};

const HEAD_LEAVES: [&str; 4] = ["ln.g", "ln.b", "out.w", "out.b"];

/// Adds the auxiliary classifier at `exit_layer` to a pretrained store,
/// warm-started as a copy of the final head.
pub fn depthfl_server_init(
    pretrained: &ParamStore<f32>,
    arch: &ArchitectureDescriptor,
    exit_layer: usize,
) -> Result<ParamStore<f32>> {
    if exit_layer < 1 || exit_layer >= arch.layers {
        return Err(Error::config(format!(
            "auxiliary exit must sit strictly inside the stack, got layer {exit_layer} of {}",
            arch.layers
        )));
    }
    let mut out = pretrained.clone();
    for leaf in HEAD_LEAVES {
        let head = pretrained
            .try_get(&format!("head.{leaf}"))
            .ok_or_else(|| Error::shape(format!("pretrained store is missing head.{leaf}")))?;
        out.insert(format!("exit{exit_layer}.{leaf}"), head.clone());
    }
    Ok(out)
}

/// Training loss over however many exits a device computes: the
/// unweighted sum of each exit's mean cross entropy.
pub fn depthfl_loss<S: Scalar>(exit_logits: &[&Tensor<S>], targets: &[u32]) -> Result<f64> {
    if exit_logits.is_empty() {
        return Err(Error::config("no active exits"));
    }
    let mut total = 0.0;
    for logits in exit_logits {
        total += mean_cross_entropy(logits, targets)?;
    }
    Ok(total)
}

fn layer_index(name: &str) -> Option<usize> {
    name.strip_prefix("layer")?.split('.').next()?.parse().ok()
}

/// Trains one round. Weak devices (`strong: false`) instantiate a
/// truncated model whose own head is the global auxiliary exit; strong
/// devices train the full stack through both classifiers.
pub fn local_train_depthfl(
    global: &ParamStore<f32>,
    arch: &ArchitectureDescriptor,
    exit_layer: usize,
    strong: bool,
    setup: &LocalSetup,
    batches: &mut BatchSource,
    rng: &mut ChaCha8Rng,
) -> Result<LocalOutcome> {
    if exit_layer < 1 || exit_layer >= arch.layers {
        return Err(Error::config(format!(
            "auxiliary exit must sit strictly inside the stack, got layer {exit_layer} of {}",
            arch.layers
        )));
    }
    let mut dims = ModelDims::from_arch(arch);
    let exit_prefix = format!("exit{exit_layer}.");
    let mut model = if strong {
        let mut m = Model::empty(dims, Variant::full(), vec![exit_layer, arch.layers])?;
        m.params = global.clone();
        m
    } else {
        dims.layers = exit_layer;
        let mut m = Model::empty(dims, Variant::full(), vec![exit_layer])?;
        let mut params = ParamStore::new();
        for (name, tensor) in global.iter() {
            if name.starts_with("embed.") {
                params.insert(name.clone(), tensor.clone());
            } else if let Some(i) = layer_index(name) {
                if i < exit_layer {
                    params.insert(name.clone(), tensor.clone());
                }
            } else if let Some(leaf) = name.strip_prefix(&exit_prefix) {
                params.insert(format!("head.{leaf}"), tensor.clone());
            }
        }
        m.params = params;
        m
    };
    let stats = run_local_steps(&mut model, setup, batches, rng)?;
    let raw = trained_payload(&model)?;
    let tensors = if strong {
        raw
    } else {
        let mut renamed = ParamStore::new();
        for (name, tensor) in raw.iter() {
            match name.strip_prefix("head.") {
                Some(leaf) => renamed.insert(format!("{exit_prefix}{leaf}"), tensor.clone()),
                None => renamed.insert(name.clone(), tensor.clone()),
            };
        }
        renamed
    };
    Ok(LocalOutcome {
        update: ClientUpdate::new(setup.client, setup.round, Payload::Tensors(tensors)),
        stats,
    })
}

/// Whole-tensor participation-weighted merge; shallow tensors simply
/// see more contributors than deep ones.
pub fn aggregate_depthfl(
    state: &AggregationState,
    updates: &[ClientUpdate],
    n: usize,
) -> Result<ParamStore<f32>> {
    aggregate_layerft(state, updates, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{earlyexit_cost, TrainingShape};
    use crate::data::lm_batch;
    use crate::nn::OptimizerSpec;
    use crate::rng::Splitter;

    fn arch() -> ArchitectureDescriptor {
        ArchitectureDescriptor::tiny(3)
    }

    fn server_store() -> ParamStore<f32> {
        let dims = ModelDims::from_arch(&arch());
        let pretrained = Model::<f32>::init(dims, Variant::full(), vec![3], 11)
            .unwrap()
            .params;
        depthfl_server_init(&pretrained, &arch(), 2).unwrap()
    }

    fn train(global: &ParamStore<f32>, strong: bool, client: usize, lr: f64) -> LocalOutcome {
        let spec = OptimizerSpec::default();
        let setup = LocalSetup {
            client,
            round: 0,
            steps: 2,
            lr,
            optimizer: &spec,
        };
        let data: Vec<u32> = (0..200u32).map(|v| (v * 7) % 16).collect();
        let mut batches = |rng: &mut ChaCha8Rng| lm_batch(&data, 2, 8, rng);
        let mut rng = Splitter::new(90 + client as u64).rng();
        local_train_depthfl(global, &arch(), 2, strong, &setup, &mut batches, &mut rng).unwrap()
    }

    #[test]
    fn summed_loss_matches_per_exit_cross_entropies() {
        let logits = Tensor::<f64>::zeros(vec![2, 4]);
        let targets = [1u32, 3];
        let single = depthfl_loss(&[&logits], &targets).unwrap();
        assert!((single - (4.0f64).ln()).abs() < 1e-12);
        let double = depthfl_loss(&[&logits, &logits], &targets).unwrap();
        assert!((double - 2.0 * single).abs() < 1e-12);
        assert!(depthfl_loss::<f64>(&[], &targets).is_err());
    }

    #[test]
    fn server_init_copies_the_final_head_and_checks_bounds() {
        let store = server_store();
        for leaf in HEAD_LEAVES {
            let aux = store.get(&format!("exit2.{leaf}"));
            let head = store.get(&format!("head.{leaf}"));
            assert_eq!(aux.data(), head.data());
        }
        let dims = ModelDims::from_arch(&arch());
        let pretrained = Model::<f32>::init(dims, Variant::full(), vec![3], 11)
            .unwrap()
            .params;
        assert!(depthfl_server_init(&pretrained, &arch(), 0).is_err());
        assert!(depthfl_server_init(&pretrained, &arch(), 3).is_err());
    }

    #[test]
    fn weak_payload_stops_at_the_exit_and_renames_its_head() {
        let global = server_store();
        let update = train(&global, false, 0, 1e-3).update;
        let tensors = update.payload.tensors();
        assert!(tensors.contains("layer0.qkv.w"));
        assert!(tensors.contains("layer1.qkv.w"));
        assert!(!tensors.contains("layer2.qkv.w"));
        assert!(tensors.contains("exit2.out.w"));
        assert!(!tensors.contains("head.out.w"));
        assert!(!tensors.contains("embed.tok"));
    }

    #[test]
    fn strong_payload_covers_all_layers_and_both_heads() {
        let global = server_store();
        let update = train(&global, true, 1, 1e-3).update;
        let tensors = update.payload.tensors();
        for i in 0..3 {
            assert!(tensors.contains(&format!("layer{i}.qkv.w")));
        }
        assert!(tensors.contains("exit2.out.w"));
        assert!(tensors.contains("head.out.w"));
        assert!(!tensors.contains("embed.tok"));
    }

    #[test]
    fn costs_match_predictions_for_both_roles() {
        let global = server_store();
        let shape = TrainingShape::new(2, 8, 2).unwrap();
        let weak = train(&global, false, 0, 1e-3);
        let weak_cost = earlyexit_cost(&arch(), 2, false, &shape).unwrap();
        assert_eq!(weak.update.upload_bytes, weak_cost.resource.upload_bytes);
        assert_eq!(weak.stats.flops, weak_cost.resource.flops);
        assert_eq!(
            weak.stats.peak_memory_bytes,
            weak_cost.resource.memory_bytes
        );

        let strong = train(&global, true, 1, 1e-3);
        let strong_cost = earlyexit_cost(&arch(), 2, true, &shape).unwrap();
        assert_eq!(strong.update.upload_bytes, strong_cost.resource.upload_bytes);
        assert_eq!(strong.stats.flops, strong_cost.resource.flops);
        assert_eq!(
            strong.stats.peak_memory_bytes,
            strong_cost.resource.memory_bytes
        );
    }

    #[test]
    fn mixed_roles_average_shared_tensors_and_pass_deep_ones_through() {
        let global = server_store();
        let weak = train(&global, false, 0, 1e-2);
        let strong = train(&global, true, 1, 1e-2);
        let state = AggregationState::new(0, global.clone());
        let merged =
            aggregate_depthfl(&state, &[weak.update.clone(), strong.update.clone()], 2).unwrap();

        let weak_t = weak.update.payload.tensors();
        let strong_t = strong.update.payload.tensors();
        // Shared shallow tensor: both contribute.
        let name = "layer0.ffn_in.w";
        let old = global.get(name);
        let a = weak_t.get(name);
        let b = strong_t.get(name);
        let got = merged.get(name);
        for i in 0..old.len() {
            let delta = (a.data()[i] as f64 - old.data()[i] as f64)
                + (b.data()[i] as f64 - old.data()[i] as f64);
            let want = if delta != 0.0 {
                (old.data()[i] as f64 + delta / 2.0) as f32
            } else {
                old.data()[i]
            };
            assert_eq!(got.data()[i].to_bits(), want.to_bits());
        }
        // Deep tensor: only the strong client covers it.
        let name = "layer2.ffn_in.w";
        let old = global.get(name);
        let b = strong_t.get(name);
        let got = merged.get(name);
        for i in 0..old.len() {
            let delta = b.data()[i] as f64 - old.data()[i] as f64;
            let want = if delta != 0.0 {
                (old.data()[i] as f64 + delta / 2.0) as f32
            } else {
                old.data()[i]
            };
            assert_eq!(got.data()[i].to_bits(), want.to_bits());
        }
        // Embeddings stay frozen bit for bit.
        let old = global.get("embed.tok");
        let got = merged.get("embed.tok");
        for i in 0..old.len() {
            assert_eq!(got.data()[i].to_bits(), old.data()[i].to_bits());
        }
    }
}
