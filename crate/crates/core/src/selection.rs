//! Server-side architecture selection: filter the pretrained family down
//! to architectures every device can train at least one layer of, then
//! pick the one maximizing the average number of trained layers.

use serde::Serialize;

use crate::arch::{ArchitectureDescriptor, DeviceConstraint, TrainingConfiguration};
use crate::cost::{layerft_cost, TrainingShape};
use crate::error::{Error, Result};

/// Outcome of selecting an architecture for a device fleet.
#[derive(Clone, Debug, Serialize)]
pub struct SelectionResult {
    /// Index of the chosen architecture in the input list.
    pub arch_index: usize,
    pub arch: ArchitectureDescriptor,
    /// Trained-layer assignment per device (same order as the input).
    pub per_device_t: Vec<usize>,
    /// Mean of `per_device_t`.
    pub average_t: f64,
    /// Indices of all architectures that passed the feasibility filter.
    pub feasible: Vec<usize>,
}

/// Largest `t` whose layer-finetuning cost fits the device's memory,
/// upload and compute budgets (all bounds inclusive), or `None` when
/// even one trained layer is too much.
pub fn max_trainable_layers(
    arch: &ArchitectureDescriptor,
    constraint: &DeviceConstraint,
    shape: &TrainingShape,
) -> Option<usize> {
    (1..=arch.layers)
        .rev()
        .find(|&t| {
            let config = TrainingConfiguration::new(*arch, t)
                .expect("t is within [1, layers] by construction");
            layerft_cost(&config, shape).resource.fits(constraint)
        })
}

/// Keeps the architectures every device can train with at least one
/// layer. Returns indices into `archs`.
pub fn feasible_architectures(
    archs: &[ArchitectureDescriptor],
    devices: &[DeviceConstraint],
    shape: &TrainingShape,
) -> Vec<usize> {
    archs
        .iter()
        .enumerate()
        .filter(|(_, arch)| {
            devices
                .iter()
                .all(|c| max_trainable_layers(arch, c, shape).is_some())
        })
        .map(|(i, _)| i)
        .collect()
}

/// Chooses the feasible architecture maximizing the average trained
/// layers, assigning each device its own maximum feasible `t`. Ties on
/// the average are broken toward more total layers, remaining ties
/// toward the earlier list position.
pub fn select_architecture(
    archs: &[ArchitectureDescriptor],
    devices: &[DeviceConstraint],
    shape: &TrainingShape,
) -> Result<SelectionResult> {
    if archs.is_empty() {
        return Err(Error::config("empty architecture list"));
    }
    if devices.is_empty() {
        return Err(Error::config("empty device list"));
    }
    let feasible = feasible_architectures(archs, devices, shape);
    if feasible.is_empty() {
        return Err(Error::infeasible(
            "no architecture is trainable by every device (no suitable model)",
        ));
    }
    // Compare averages through the integer sum of t over the fixed
    // device count so ties are exact.
    let mut best: Option<(u64, usize, usize, Vec<usize>)> = None; // (sum_t, layers, index, ts)
    for &idx in &feasible {
        let arch = &archs[idx];
        let ts: Vec<usize> = devices
            .iter()
            .map(|c| {
                max_trainable_layers(arch, c, shape)
                    .expect("feasibility filter guarantees a valid t")
            })
            .collect();
        let sum_t: u64 = ts.iter().map(|&t| t as u64).sum();
        let better = match &best {
            None => true,
            Some((best_sum, best_layers, _, _)) => {
                sum_t > *best_sum || (sum_t == *best_sum && arch.layers > *best_layers)
            }
        };
        if better {
            best = Some((sum_t, arch.layers, idx, ts));
        }
    }
    let (sum_t, _, arch_index, per_device_t) = best.expect("feasible set is non-empty");
    Ok(SelectionResult {
        arch_index,
        arch: archs[arch_index],
        average_t: sum_t as f64 / devices.len() as f64,
        per_device_t,
        feasible,
    })
}
