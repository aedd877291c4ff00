//! Layer finetuning: each client trains the last `t` blocks plus the
//! head of the full model and uploads exactly those tensors. The server
//! merges per layer — a layer trained by `k` of `n` participants moves
//! `k/n` of the way toward the contributors' mean, deeper-frozen layers
//! stay put, and the head (trained by everyone) is a plain mean.

use rand_chacha::ChaCha8Rng;

use crate::arch::ArchitectureDescriptor;
use crate::error::Result;
use crate::nn::{Model, ModelDims, ParamStore, Variant};

use super::{
    check_round_and_clients, coverage_merge, run_local_steps, trained_payload,
    whole_tensor_contribution, AggregationState, BatchSource, ClientUpdate, Contribution,
    LocalOutcome, LocalSetup, Payload,
};

/// Trains the last `trained_layers` blocks and the head of the received
/// global model for one round.
pub fn local_train_layerft(
    global: &ParamStore<f32>,
    arch: &ArchitectureDescriptor,
    trained_layers: usize,
    setup: &LocalSetup,
    batches: &mut BatchSource,
    rng: &mut ChaCha8Rng,
) -> Result<LocalOutcome> {
    let dims = ModelDims::from_arch(arch);
    let mut model = Model::empty(
        dims,
        Variant::last_layers(arch.layers, trained_layers),
        vec![arch.layers],
    )?;
    model.params = global.clone();
    let stats = run_local_steps(&mut model, setup, batches, rng)?;
    let payload = Payload::Tensors(trained_payload(&model)?);
    Ok(LocalOutcome {
        update: ClientUpdate::new(setup.client, setup.round, payload),
        stats,
    })
}

/// Merges whole-tensor updates into the global model with the
/// participation-weighted rule; tensors no client trained stay bitwise
/// unchanged.
pub fn aggregate_layerft(
    state: &AggregationState,
    updates: &[ClientUpdate],
    n: usize,
) -> Result<ParamStore<f32>> {
    check_round_and_clients(state, updates, n)?;
    let mut contributions = Vec::with_capacity(updates.len());
    for update in updates {
        let Payload::Tensors(tensors) = &update.payload else {
            return Err(crate::error::Error::config(format!(
                "client {} sent a payload kind this aggregator does not accept",
                update.client
            )));
        };
        let mut per_tensor = std::collections::BTreeMap::new();
        for (name, tensor) in tensors.iter() {
            let (key, tc) = whole_tensor_contribution(name, tensor, &state.global)?;
            per_tensor.insert(key, tc);
        }
        contributions.push(Contribution {
            client: update.client,
            tensors: per_tensor,
        });
    }
    coverage_merge(&state.global, &contributions, n)
}
