//! Architecture descriptors, training configurations, and device
//! constraint scenarios.
//!
//! A pretrained model family varies only in its number of stacked layers;
//! a training configuration picks how many of the last layers are trained
//! while the rest stay frozen. Device constraints are static budget
//! triples (peak memory, upload bytes, FLOPs per round).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Splitter;

/// Shape of a decoder-only Transformer: `layers` stacked blocks, each a
/// multi-head attention module plus a feedforward block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    /// Number of stacked Transformer blocks `l`.
    pub layers: usize,
    /// Embedding dimension `D`.
    pub embed_dim: usize,
    /// Attention heads `h`; must divide `embed_dim`.
    pub heads: usize,
    /// FFN hidden width multiplier; hidden width is `ffn_mult * embed_dim`.
    pub ffn_mult: usize,
    /// Vocabulary size `V`.
    pub vocab: usize,
    /// Maximum context length `T` (position table rows).
    pub context: usize,
    /// Bytes per parameter/activation scalar (single precision accounting).
    pub scalar_bytes: usize,
}

impl ArchitectureDescriptor {
    pub fn new(
        layers: usize,
        embed_dim: usize,
        heads: usize,
        ffn_mult: usize,
        vocab: usize,
        context: usize,
    ) -> Result<Self> {
        let a = ArchitectureDescriptor {
            layers,
            embed_dim,
            heads,
            ffn_mult,
            vocab,
            context,
            scalar_bytes: 4,
        };
        a.validate()?;
        Ok(a)
    }

    /// Desk-scale defaults: D=32, h=4, ffn_mult=4, character vocab 128,
    /// context 64. Paper-scale descriptors remain valid inputs; these
    /// dimensions keep experiments runnable on a CPU.
    pub fn desk(layers: usize) -> Self {
        ArchitectureDescriptor {
            layers,
            embed_dim: 32,
            heads: 4,
            ffn_mult: 4,
            vocab: 128,
            context: 64,
            scalar_bytes: 4,
        }
    }

    /// Tiny verification-scale descriptor used by gradient and counter
    /// oracles.
    pub fn tiny(layers: usize) -> Self {
        ArchitectureDescriptor {
            layers,
            embed_dim: 8,
            heads: 2,
            ffn_mult: 4,
            vocab: 16,
            context: 16,
            scalar_bytes: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::config("layers must be >= 1"));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("vocab", self.vocab),
            ("context", self.context),
            ("scalar_bytes", self.scalar_bytes),
        ] {
            if v < 1 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    /// FFN hidden width.
    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.embed_dim
    }

    /// Per-head dimension.
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// A sibling descriptor differing only in layer count.
    pub fn sibling(&self, layers: usize) -> Self {
        ArchitectureDescriptor { layers, ..*self }
    }
}

/// A descriptor plus the number `t` of trained layers.
///
/// The frozen layer index set is exactly `[1, ..., l-t]` (1-based); layers
/// `[l-t+1, ..., l]` train. The embedding tables are always frozen; the
/// output head (final norm + output linear) always trains, for every `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingConfiguration {
    pub arch: ArchitectureDescriptor,
    pub trained_layers: usize,
}

impl TrainingConfiguration {
    pub fn new(arch: ArchitectureDescriptor, trained_layers: usize) -> Result<Self> {
        if trained_layers < 1 || trained_layers > arch.layers {
            return Err(Error::config(format!(
                "trained_layers {} out of range [1, {}]",
                trained_layers, arch.layers
            )));
        }
        Ok(TrainingConfiguration {
            arch,
            trained_layers,
        })
    }

    /// Number of frozen block layers.
    pub fn frozen_layers(&self) -> usize {
        self.arch.layers - self.trained_layers
    }

    /// 0-based index of the first trained layer.
    pub fn first_trained(&self) -> usize {
        self.arch.layers - self.trained_layers
    }
}

/// All `l` training configurations of an architecture, `t = 1..=l`
/// ascending.
pub fn enumerate_configurations(arch: &ArchitectureDescriptor) -> Vec<TrainingConfiguration> {
    (1..=arch.layers)
        .map(|t| TrainingConfiguration {
            arch: *arch,
            trained_layers: t,
        })
        .collect()
}

/// A budget axis: either unbounded or an inclusive upper bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Limit {
    Unbounded,
    At(u64),
}

impl Limit {
    pub fn allows(&self, need: u64) -> bool {
        match self {
            Limit::Unbounded => true,
            Limit::At(cap) => need <= *cap,
        }
    }

    pub fn bound(&self) -> Option<u64> {
        match self {
            Limit::Unbounded => None,
            Limit::At(cap) => Some(*cap),
        }
    }
}

/// Static per-device budgets: peak training memory, upload per round, and
/// computation (FLOPs) per round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceConstraint {
    pub memory_bytes: Limit,
    pub upload_bytes: Limit,
    pub flops: Limit,
}

impl DeviceConstraint {
    pub const UNBOUNDED: DeviceConstraint = DeviceConstraint {
        memory_bytes: Limit::Unbounded,
        upload_bytes: Limit::Unbounded,
        flops: Limit::Unbounded,
    };

    pub fn memory(bytes: u64) -> Self {
        DeviceConstraint {
            memory_bytes: Limit::At(bytes),
            ..Self::UNBOUNDED
        }
    }

    pub fn upload(bytes: u64) -> Self {
        DeviceConstraint {
            upload_bytes: Limit::At(bytes),
            ..Self::UNBOUNDED
        }
    }

    pub fn compute(flops: u64) -> Self {
        DeviceConstraint {
            flops: Limit::At(flops),
            ..Self::UNBOUNDED
        }
    }
}

/// A mixture of device groups; each group is a fraction of the population
/// sharing one constraint triple. Group membership is fixed for a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstraintScenario {
    pub total_devices: usize,
    pub groups: Vec<(f64, DeviceConstraint)>,
}

/// A device id bound to its group and constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeviceProfile {
    pub id: usize,
    pub group: usize,
    pub constraint: DeviceConstraint,
}

/// Deterministically assigns each device id to a constraint group.
///
/// Group sizes are `round(fraction * total)` corrected by largest
/// remainder so they sum to the device count; the id-to-group mapping is
/// a seeded permutation.
pub fn assign_devices(scenario: &ConstraintScenario, seed: u64) -> Result<Vec<DeviceProfile>> {
    let n = scenario.total_devices;
    if n < 1 {
        return Err(Error::config("total_devices must be >= 1"));
    }
    if scenario.groups.is_empty() {
        return Err(Error::config("scenario needs at least one group"));
    }
    let frac_sum: f64 = scenario.groups.iter().map(|(f, _)| f).sum();
    if (frac_sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "group fractions sum to {frac_sum}, expected 1"
        )));
    }

    let sizes = largest_remainder_counts(
        &scenario.groups.iter().map(|(f, _)| *f).collect::<Vec<_>>(),
        n,
    );

    // Seeded permutation of device ids, then contiguous blocks per group.
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = Splitter::new(seed).derive(&[0x61737369]).rng();
    shuffle(&mut ids, &mut rng);

    let mut profiles = vec![
        DeviceProfile {
            id: 0,
            group: 0,
            constraint: DeviceConstraint::UNBOUNDED,
        };
        n
    ];
    let mut cursor = 0usize;
    for (group, (&size, (_, constraint))) in sizes.iter().zip(&scenario.groups).enumerate() {
        for &id in &ids[cursor..cursor + size] {
            profiles[id] = DeviceProfile {
                id,
                group,
                constraint: *constraint,
            };
        }
        cursor += size;
    }
    Ok(profiles)
}

/// Apportions `total` into integer counts proportional to `fractions`
/// using the largest-remainder method (ties broken by lower index).
pub fn largest_remainder_counts(fractions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..total.saturating_sub(assigned) {
        counts[order[i % fractions.len()]] += 1;
    }
    counts
}

fn shuffle<R: rand::Rng>(ids: &mut [usize], rng: &mut R) {
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumerate_covers_all_depths() {
        let arch = ArchitectureDescriptor::desk(3);
        let configs = enumerate_configurations(&arch);
        assert_eq!(
            configs.iter().map(|c| c.trained_layers).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );

        let single = ArchitectureDescriptor::desk(1);
        assert_eq!(enumerate_configurations(&single).len(), 1);

        let deep = ArchitectureDescriptor::desk(12);
        let configs = enumerate_configurations(&deep);
        assert_eq!(configs.len(), 12);
        assert_eq!(configs.last().unwrap().frozen_layers(), 0);
    }

    #[test]
    fn invalid_descriptors_rejected() {
        assert!(ArchitectureDescriptor::new(0, 32, 4, 4, 128, 64).is_err());
        assert!(ArchitectureDescriptor::new(2, 30, 4, 4, 128, 64).is_err());
        assert!(ArchitectureDescriptor::new(2, 32, 4, 4, 128, 64).is_ok());
    }

    #[test]
    fn trained_layer_range_enforced() {
        let arch = ArchitectureDescriptor::desk(3);
        assert!(TrainingConfiguration::new(arch, 0).is_err());
        assert!(TrainingConfiguration::new(arch, 4).is_err());
        let cfg = TrainingConfiguration::new(arch, 2).unwrap();
        assert_eq!(cfg.frozen_layers(), 1);
        assert_eq!(cfg.first_trained(), 1);
    }

    #[test]
    fn single_group_assigns_everyone() {
        let scenario = ConstraintScenario {
            total_devices: 100,
            groups: vec![(1.0, DeviceConstraint::memory(1 << 20))],
        };
        let profiles = assign_devices(&scenario, 7).unwrap();
        assert_eq!(profiles.len(), 100);
        assert!(profiles.iter().all(|p| p.group == 0));
    }

    #[test]
    fn even_split_is_half_half() {
        let scenario = ConstraintScenario {
            total_devices: 100,
            groups: vec![
                (0.5, DeviceConstraint::memory(1)),
                (0.5, DeviceConstraint::memory(2)),
            ],
        };
        let profiles = assign_devices(&scenario, 3).unwrap();
        let weak = profiles.iter().filter(|p| p.group == 0).count();
        assert_eq!(weak, 50);
    }

    #[test]
    fn largest_remainder_rounds_to_total() {
        let counts = largest_remainder_counts(&[0.33, 0.33, 0.34], 10);
        assert_eq!(counts, vec![3, 3, 4]);
        let counts = largest_remainder_counts(&[0.5, 0.5], 101);
        assert_eq!(counts.iter().sum::<usize>(), 101);
    }

    #[test]
    fn assignment_is_deterministic() {
        let scenario = ConstraintScenario {
            total_devices: 37,
            groups: vec![
                (0.25, DeviceConstraint::memory(1)),
                (0.75, DeviceConstraint::memory(2)),
            ],
        };
        let a = assign_devices(&scenario, 42).unwrap();
        let b = assign_devices(&scenario, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_fractions_rejected() {
        let scenario = ConstraintScenario {
            total_devices: 10,
            groups: vec![
                (0.5, DeviceConstraint::UNBOUNDED),
                (0.4, DeviceConstraint::UNBOUNDED),
            ],
        };
        assert!(matches!(
            assign_devices(&scenario, 0),
            Err(Error::Config(_))
        ));
    }
}
