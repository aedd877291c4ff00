//! Randomized invariants of the aggregation rules, checked per
//! coordinate against independently recomputed coverage.
//!
//! Updates are synthesized directly at the payload level (no training),
//! with values drawn from a 2^-10 grid bounded by 8 in magnitude. Sums
//! and differences of such values are exact in f64, convex-hull
//! endpoints are exactly representable in f32, and a combination can
//! only reach an endpoint when every term equals it — so hull
//! containment, untouched-coordinate preservation, and fixed points can
//! all be asserted without tolerances, down to the bit.

use std::collections::BTreeMap;

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use flift_core::arch::ArchitectureDescriptor;
use flift_core::cost::{
    earlyexit_cost, layerft_cost, lora_cost, lowrank_cost, subset_cost, TrainingShape,
};
use flift_core::nn::subset::SubsetSpec;
use flift_core::nn::{Model, ModelDims, ParamStore, Variant};
use flift_core::rng::Splitter;
use flift_core::strategies::{
    aggregate_depthfl, aggregate_fedhm, aggregate_hetlora, aggregate_layerft, aggregate_subset,
    fedrolex_index_set, fedrolex_subset, heterofl_index_set, heterofl_subset, AggregationState,
    ClientUpdate, Payload,
};
use flift_core::tensor::Tensor;
use flift_core::TrainingConfiguration;

fn tiny(l: usize) -> ArchitectureDescriptor {
    ArchitectureDescriptor::tiny(l)
}

/// A value from the 2^-10 grid in [-4, 4]; zeros carry a random sign so
/// negative-zero coordinates exercise the fixed-point path.
fn fine(rng: &mut ChaCha8Rng) -> f32 {
    let q: i32 = rng.random_range(-4096..=4096);
    if q == 0 && rng.random::<bool>() {
        -0.0
    } else {
        q as f32 / 1024.0
    }
}

/// A value from the 2^-5 grid in [-1, 1]. A product of two such values
/// lies on the 2^-10 grid, and partial sums of up to eight products stay
/// within |8|, so factor-pair reconstructions are exact in f32 no matter
/// the summation order.
fn coarse(rng: &mut ChaCha8Rng) -> f32 {
    rng.random_range(-32..=32i32) as f32 / 32.0
}

fn refill(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) {
    for (_, tensor) in store.iter_mut() {
        for v in tensor.data_mut() {
            *v = fine(rng);
        }
    }
}

fn whole_like(t: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::new(t.shape().to_vec(), (0..t.len()).map(|_| fine(rng)).collect())
}

fn plain_global(l: usize, exits: Vec<usize>, rng: &mut ChaCha8Rng) -> ParamStore<f32> {
    let dims = ModelDims::from_arch(&tiny(l));
    let mut params = Model::<f32>::init(dims, Variant::full(), exits, 1)
        .unwrap()
        .params;
    refill(&mut params, rng);
    params
}

fn adapter_global(l: usize, cap: usize, rng: &mut ChaCha8Rng) -> ParamStore<f32> {
    let dims = ModelDims::from_arch(&tiny(l));
    let mut params = Model::<f32>::init(dims, Variant::Lora { rank: cap }, vec![l], 1)
        .unwrap()
        .params;
    refill(&mut params, rng);
    params
}

fn layer_index(name: &str) -> Option<usize> {
    name.strip_prefix("layer")?.split('.').next()?.parse().ok()
}

/// Depth-scheme contract: a client training the last `t` of `l` layers
/// sends those layers and the head; embeddings never travel.
fn depth_covers(name: &str, l: usize, t: usize) -> bool {
    match layer_index(name) {
        Some(i) => i >= l - t,
        None => !name.starts_with("embed."),
    }
}

/// Early-exit contract: weak devices hold layers below the exit plus the
/// auxiliary classifier; strong devices hold everything but embeddings.
fn exitdepth_covers(name: &str, exit_layer: usize, strong: bool) -> bool {
    if name.starts_with("embed.") {
        false
    } else if let Some(i) = layer_index(name) {
        strong || i < exit_layer
    } else if name.starts_with(&format!("exit{exit_layer}.")) {
        true
    } else {
        strong
    }
}

/// Adapter contract: rank-z clients train the first z down-projection
/// columns and up-projection rows, every norm parameter, and the head;
/// frozen main matrices and linear biases never travel.
enum Cover {
    None,
    Slice,
    Whole,
}

fn adapter_cover(name: &str) -> Cover {
    if name.ends_with(".lora_down") || name.ends_with(".lora_up") {
        Cover::Slice
    } else if name.contains(".ln1.") || name.contains(".ln2.") || name.starts_with("head.") {
        Cover::Whole
    } else {
        Cover::None
    }
}

/// Full-tensor coordinates of a rank-`z` adapter slice, in the client
/// tensor's own row-major order.
fn adapter_coords(name: &str, shape: &[usize], z: usize) -> Vec<usize> {
    if name.ends_with(".lora_down") {
        let (rows, cap) = (shape[0], shape[1]);
        (0..rows)
            .flat_map(|r| (0..z).map(move |c| r * cap + c))
            .collect()
    } else if name.ends_with(".lora_up") {
        let cols = shape[1];
        (0..z * cols).collect()
    } else {
        (0..shape.iter().product()).collect()
    }
}

/// Width-subset contract: rows and columns over the index sets, with the
/// fused QKV width indices repeated per section at offsets 0, D and 2D;
/// vocabulary and context axes stay whole; embeddings never travel.
fn width_coords(name: &str, shape: &[usize], d: &[usize], fh: &[usize]) -> Option<Vec<usize>> {
    if name.starts_with("embed.") {
        return None;
    }
    let parts: Vec<&str> = name.split('.').collect();
    let (rows, cols) = match *shape {
        [c] => (1, c),
        [r, c] => (r, c),
        _ => panic!("unsupported tensor rank for {name}"),
    };
    let every_row: Vec<usize> = (0..rows).collect();
    let every_col: Vec<usize> = (0..cols).collect();
    let sectioned = |idx: &[usize]| -> Vec<usize> {
        let section = cols / 3;
        (0..3)
            .flat_map(|s| idx.iter().map(move |&i| s * section + i))
            .collect()
    };
    let (row_ids, col_ids) = match (parts[1], parts[2]) {
        ("ln1", _) | ("ln2", _) | ("ln", _) => (every_row, d.to_vec()),
        ("qkv", "w") => (d.to_vec(), sectioned(d)),
        ("qkv", "b") => (every_row, sectioned(d)),
        ("attn_out", "w") => (d.to_vec(), d.to_vec()),
        ("attn_out", "b") => (every_row, d.to_vec()),
        ("ffn_in", "w") => (d.to_vec(), fh.to_vec()),
        ("ffn_in", "b") => (every_row, fh.to_vec()),
        ("ffn_out", "w") => (fh.to_vec(), d.to_vec()),
        ("ffn_out", "b") => (every_row, d.to_vec()),
        ("out", "w") => (d.to_vec(), every_col),
        ("out", "b") => (every_row, every_col),
        other => panic!("no slicing rule for {other:?}"),
    };
    Some(
        row_ids
            .iter()
            .flat_map(|&r| col_ids.iter().map(move |&c| r * cols + c))
            .collect(),
    )
}

/// f1·f2 recomputed here: every partial sum lies on the 2^-10 grid with
/// magnitude at most 8, hence is exact regardless of summation order.
fn oracle_product(f1: &Tensor<f32>, f2: &Tensor<f32>) -> Vec<f32> {
    let (n, z) = (f1.rows(), f1.cols());
    let q = f2.cols();
    let mut out = vec![0.0f64; n * q];
    for r in 0..n {
        for k in 0..z {
            let a = f1.data()[r * z + k] as f64;
            for j in 0..q {
                out[r * q + j] += a * f2.data()[k * q + j] as f64;
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// What one client effectively contributes: full-tensor coordinates and
/// the values that land on them (after any reconstruction).
struct OracleContribution {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

fn depth_update(
    global: &ParamStore<f32>,
    l: usize,
    t: usize,
    client: usize,
    round: usize,
    echo: bool,
    rng: &mut ChaCha8Rng,
) -> (ClientUpdate, OracleContribution) {
    let mut tensors = ParamStore::new();
    let mut oracle = BTreeMap::new();
    for (name, full) in global.iter() {
        if !depth_covers(name, l, t) {
            continue;
        }
        let tensor = if echo {
            full.clone()
        } else {
            whole_like(full, rng)
        };
        oracle.insert(
            name.clone(),
            ((0..full.len()).collect(), tensor.data().to_vec()),
        );
        tensors.insert(name.clone(), tensor);
    }
    (
        ClientUpdate::new(client, round, Payload::Tensors(tensors)),
        OracleContribution { tensors: oracle },
    )
}

fn exitdepth_update(
    global: &ParamStore<f32>,
    exit_layer: usize,
    strong: bool,
    client: usize,
    round: usize,
    echo: bool,
    rng: &mut ChaCha8Rng,
) -> (ClientUpdate, OracleContribution) {
    let mut tensors = ParamStore::new();
    let mut oracle = BTreeMap::new();
    for (name, full) in global.iter() {
        if !exitdepth_covers(name, exit_layer, strong) {
            continue;
        }
        let tensor = if echo {
            full.clone()
        } else {
            whole_like(full, rng)
        };
        oracle.insert(
            name.clone(),
            ((0..full.len()).collect(), tensor.data().to_vec()),
        );
        tensors.insert(name.clone(), tensor);
    }
    (
        ClientUpdate::new(client, round, Payload::Tensors(tensors)),
        OracleContribution { tensors: oracle },
    )
}

fn adapter_update(
    global: &ParamStore<f32>,
    z: usize,
    client: usize,
    round: usize,
    echo: bool,
    rng: &mut ChaCha8Rng,
) -> (ClientUpdate, OracleContribution) {
    let mut tensors = ParamStore::new();
    let mut oracle = BTreeMap::new();
    for (name, full) in global.iter() {
        let coords = match adapter_cover(name) {
            Cover::None => continue,
            Cover::Slice => adapter_coords(name, full.shape(), z),
            Cover::Whole => (0..full.len()).collect(),
        };
        let values: Vec<f32> = if echo {
            coords.iter().map(|&i| full.data()[i]).collect()
        } else {
            coords.iter().map(|_| fine(rng)).collect()
        };
        let shape = if name.ends_with(".lora_down") {
            vec![full.shape()[0], z]
        } else if name.ends_with(".lora_up") {
            vec![z, full.shape()[1]]
        } else {
            full.shape().to_vec()
        };
        oracle.insert(name.clone(), (coords, values.clone()));
        tensors.insert(name.clone(), Tensor::new(shape, values));
    }
    (
        ClientUpdate::new(client, round, Payload::RankSlices { rank: z, tensors }),
        OracleContribution { tensors: oracle },
    )
}

fn width_update(
    global: &ParamStore<f32>,
    spec: SubsetSpec,
    client: usize,
    round: usize,
    echo: bool,
    rng: &mut ChaCha8Rng,
) -> (ClientUpdate, OracleContribution) {
    let (d, fh) = (spec.d_indices.clone(), spec.fh_indices.clone());
    let mut tensors = ParamStore::new();
    let mut oracle = BTreeMap::new();
    for (name, full) in global.iter() {
        let Some(coords) = width_coords(name, full.shape(), &d, &fh) else {
            continue;
        };
        let values: Vec<f32> = if echo {
            coords.iter().map(|&i| full.data()[i]).collect()
        } else {
            coords.iter().map(|_| fine(rng)).collect()
        };
        oracle.insert(name.clone(), (coords, values.clone()));
        tensors.insert(name.clone(), Tensor::new(vec![values.len()], values));
    }
    (
        ClientUpdate::new(client, round, Payload::Subset { spec, tensors }),
        OracleContribution { tensors: oracle },
    )
}

fn factor_update(
    global: &ParamStore<f32>,
    rank: Option<usize>,
    client: usize,
    round: usize,
    echo: bool,
    rng: &mut ChaCha8Rng,
) -> (ClientUpdate, OracleContribution) {
    let mut tensors = ParamStore::new();
    let mut oracle = BTreeMap::new();
    for (name, full) in global.iter() {
        if name.starts_with("embed.") {
            continue;
        }
        let factored = rank.filter(|_| name.ends_with(".w") && layer_index(name).is_some());
        match factored {
            Some(z) => {
                let base = name.strip_suffix(".w").unwrap();
                let (rows, cols) = (full.shape()[0], full.shape()[1]);
                let f1 = Tensor::new(
                    vec![rows, z],
                    (0..rows * z).map(|_| coarse(rng)).collect(),
                );
                let f2 = Tensor::new(
                    vec![z, cols],
                    (0..z * cols).map(|_| coarse(rng)).collect(),
                );
                let product = oracle_product(&f1, &f2);
                oracle.insert(name.clone(), ((0..full.len()).collect(), product));
                tensors.insert(format!("{base}.f1"), f1);
                tensors.insert(format!("{base}.f2"), f2);
            }
            None => {
                let tensor = if echo {
                    full.clone()
                } else {
                    whole_like(full, rng)
                };
                oracle.insert(
                    name.clone(),
                    ((0..full.len()).collect(), tensor.data().to_vec()),
                );
                tensors.insert(name.clone(), tensor);
            }
        }
    }
    (
        ClientUpdate::new(client, round, Payload::Factors { rank, tensors }),
        OracleContribution { tensors: oracle },
    )
}

/// Uncovered coordinates keep their bits; covered ones land inside the
/// convex hull of the old value and the covering contributions.
fn assert_hull(
    global: &ParamStore<f32>,
    merged: &ParamStore<f32>,
    contribs: &[OracleContribution],
) -> Result<(), TestCaseError> {
    prop_assert_eq!(merged.len(), global.len());
    for (name, old) in global.iter() {
        let got = merged.get(name);
        prop_assert_eq!(got.shape(), old.shape());
        let mut lo = vec![f32::INFINITY; old.len()];
        let mut hi = vec![f32::NEG_INFINITY; old.len()];
        let mut covered = vec![false; old.len()];
        for contrib in contribs {
            if let Some((coords, values)) = contrib.tensors.get(name) {
                for (k, &i) in coords.iter().enumerate() {
                    covered[i] = true;
                    lo[i] = lo[i].min(values[k]);
                    hi[i] = hi[i].max(values[k]);
                }
            }
        }
        for i in 0..old.len() {
            let (o, g) = (old.data()[i], got.data()[i]);
            if !covered[i] {
                prop_assert_eq!(g.to_bits(), o.to_bits(), "uncovered {}[{}]", name, i);
            } else {
                let (lo_i, hi_i) = (lo[i].min(o), hi[i].max(o));
                prop_assert!(
                    g >= lo_i && g <= hi_i,
                    "{}[{}]: {} escapes hull [{}, {}]",
                    name,
                    i,
                    g,
                    lo_i,
                    hi_i
                );
            }
        }
    }
    Ok(())
}

fn assert_bitwise_equal(a: &ParamStore<f32>, b: &ParamStore<f32>) -> Result<(), TestCaseError> {
    prop_assert_eq!(a.len(), b.len());
    for (name, ta) in a.iter() {
        let tb = b.try_get(name);
        prop_assert!(tb.is_some(), "missing tensor {}", name);
        let tb = tb.unwrap();
        prop_assert_eq!(ta.len(), tb.len(), "{}", name);
        for (x, y) in ta.data().iter().zip(tb.data()) {
            prop_assert_eq!(x.to_bits(), y.to_bits(), "{}", name);
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn depth_merge_stays_in_hull_and_is_order_independent(
        seed in any::<u64>(),
        l in 1usize..=3,
        raw_depths in prop::collection::vec(1usize..=3, 1..=5),
        extra in 0usize..=3,
    ) {
        let depths: Vec<usize> = raw_depths.iter().map(|&t| t.min(l)).collect();
        let n = depths.len() + extra;
        let root = Splitter::new(seed);
        let global = plain_global(l, vec![l], &mut root.derive(&[1]).rng());
        let round = (seed % 17) as usize;
        let mut updates = Vec::new();
        let mut oracles = Vec::new();
        for (j, &t) in depths.iter().enumerate() {
            let mut rng = root.derive(&[2, j as u64]).rng();
            let (u, o) = depth_update(&global, l, t, j, round, false, &mut rng);
            updates.push(u);
            oracles.push(o);
        }
        let state = AggregationState::new(round, global.clone());
        let merged = aggregate_layerft(&state, &updates, n).unwrap();
        assert_hull(&global, &merged, &oracles)?;
        updates.reverse();
        let again = aggregate_layerft(&state, &updates, n).unwrap();
        assert_bitwise_equal(&merged, &again)?;
    }

    #[test]
    fn depth_echoes_are_bitwise_fixed_points(
        seed in any::<u64>(),
        l in 1usize..=3,
        raw_depths in prop::collection::vec(1usize..=3, 1..=5),
        extra in 0usize..=3,
    ) {
        let root = Splitter::new(seed);
        let global = plain_global(l, vec![l], &mut root.derive(&[1]).rng());
        let mut updates = Vec::new();
        for (j, &raw) in raw_depths.iter().enumerate() {
            let mut rng = root.derive(&[2, j as u64]).rng();
            let (u, _) = depth_update(&global, l, raw.min(l), j, 0, true, &mut rng);
            updates.push(u);
        }
        let state = AggregationState::new(0, global.clone());
        let merged = aggregate_layerft(&state, &updates, raw_depths.len() + extra).unwrap();
        assert_bitwise_equal(&merged, &global)?;
    }

    #[test]
    fn adapter_merge_stays_in_hull_and_is_order_independent(
        seed in any::<u64>(),
        l in 1usize..=3,
        cap in 1usize..=8,
        raw_ranks in prop::collection::vec(1usize..=8, 1..=5),
        extra in 0usize..=3,
    ) {
        let root = Splitter::new(seed);
        let global = adapter_global(l, cap, &mut root.derive(&[1]).rng());
        let round = (seed % 13) as usize;
        let mut updates = Vec::new();
        let mut oracles = Vec::new();
        for (j, &raw) in raw_ranks.iter().enumerate() {
            let mut rng = root.derive(&[2, j as u64]).rng();
            let (u, o) = adapter_update(&global, raw.min(cap), j, round, false, &mut rng);
            updates.push(u);
            oracles.push(o);
        }
        let n = raw_ranks.len() + extra;
        let state = AggregationState::new(round, global.clone());
        let merged = aggregate_hetlora(&state, &updates, n, cap).unwrap();
        assert_hull(&global, &merged, &oracles)?;
        updates.reverse();
        let again = aggregate_hetlora(&state, &updates, n, cap).unwrap();
        assert_bitwise_equal(&merged, &again)?;
    }

    #[test]
    fn adapter_echoes_are_bitwise_fixed_points(
        seed in any::<u64>(),
        l in 1usize..=3,
        cap in 1usize..=8,
        raw_ranks in prop::collection::vec(1usize..=8, 1..=5),
        extra in 0usize..=3,
    ) {
        let root = Splitter::new(seed);
        let global = adapter_global(l, cap, &mut root.derive(&[1]).rng());
        let mut updates = Vec::new();
        for (j, &raw) in raw_ranks.iter().enumerate() {
            let mut rng = root.derive(&[2, j as u64]).rng();
            let (u, _) = adapter_update(&global, raw.min(cap), j, 0, true, &mut rng);
            updates.push(u);
        }
        let state = AggregationState::new(0, global.clone());
        let merged = aggregate_hetlora(&state, &updates, raw_ranks.len() + extra, cap).unwrap();
        assert_bitwise_equal(&merged, &global)?;
    }

    #[test]
    fn width_merge_stays_in_hull_and_is_order_independent(
        seed in any::<u64>(),
        l in 1usize..=3,
        levels in prop::collection::vec((0usize..=5, any::<bool>()), 1..=5),
        extra in 0usize..=3,
    ) {
        let scales = [0.25, 0.375, 0.5, 0.625, 0.75, 1.0];
        let arch = tiny(l);
        let root = Splitter::new(seed);
        let global = plain_global(l, vec![l], &mut root.derive(&[1]).rng());
        let round = (seed % 29) as usize;
        let mut updates = Vec::new();
        let mut oracles = Vec::new();
        for (j, &(s_idx, rolling)) in levels.iter().enumerate() {
            let s = scales[s_idx];
            let spec = if rolling {
                fedrolex_subset(&arch, s, round).unwrap()
            } else {
                heterofl_subset(&arch, s).unwrap()
            };
            let mut rng = root.derive(&[2, j as u64]).rng();
            let (u, o) = width_update(&global, spec, j, round, false, &mut rng);
            updates.push(u);
            oracles.push(o);
        }
        let n = levels.len() + extra;
        let state = AggregationState::new(round, global.clone());
        let merged = aggregate_subset(&state, &updates, n).unwrap();
        assert_hull(&global, &merged, &oracles)?;
        updates.reverse();
        let again = aggregate_subset(&state, &updates, n).unwrap();
        assert_bitwise_equal(&merged, &again)?;
    }

    #[test]
    fn width_echoes_are_bitwise_fixed_points(
        seed in any::<u64>(),
        l in 1usize..=3,
        levels in prop::collection::vec((0usize..=5, any::<bool>()), 1..=5),
        extra in 0usize..=3,
    ) {
        let scales = [0.25, 0.375, 0.5, 0.625, 0.75, 1.0];
        let arch = tiny(l);
        let root = Splitter::new(seed);
        let global = plain_global(l, vec![l], &mut root.derive(&[1]).rng());
        let round = (seed % 29) as usize;
        let mut updates = Vec::new();
        for (j, &(s_idx, rolling)) in levels.iter().enumerate() {
            let spec = if rolling {
                fedrolex_subset(&arch, scales[s_idx], round).unwrap()
            } else {
                heterofl_subset(&arch, scales[s_idx]).unwrap()
            };
            let mut rng = root.derive(&[2, j as u64]).rng();
            let (u, _) = width_update(&global, spec, j, round, true, &mut rng);
            updates.push(u);
        }
        let state = AggregationState::new(round, global.clone());
        let merged = aggregate_subset(&state, &updates, levels.len() + extra).unwrap();
        assert_bitwise_equal(&merged, &global)?;
    }

    #[test]
    fn factor_merge_stays_in_hull_and_is_order_independent(
        seed in any::<u64>(),
        l in 1usize..=3,
        roles in prop::collection::vec(0usize..=8, 1..=4),
        extra in 0usize..=3,
    ) {
        let root = Splitter::new(seed);
        let global = plain_global(l, vec![l], &mut root.derive(&[1]).rng());
        let round = (seed % 11) as usize;
        let mut updates = Vec::new();
        let mut oracles = Vec::new();
        for (j, &raw) in roles.iter().enumerate() {
            let rank = if raw == 0 { None } else { Some(raw) };
            let mut rng = root.derive(&[2, j as u64]).rng();
            let (u, o) = factor_update(&global, rank, j, round, false, &mut rng);
            updates.push(u);
            oracles.push(o);
        }
        let n = roles.len() + extra;
        let state = AggregationState::new(round, global.clone());
        let merged = aggregate_fedhm(&state, &updates, n).unwrap();
        assert_hull(&global, &merged, &oracles)?;
        updates.reverse();
        let again = aggregate_fedhm(&state, &updates, n).unwrap();
        assert_bitwise_equal(&merged, &again)?;
    }

    #[test]
    fn factor_unfactorized_echoes_are_bitwise_fixed_points(
        seed in any::<u64>(),
        l in 1usize..=3,
        clients in 1usize..=4,
        extra in 0usize..=3,
    ) {
        let root = Splitter::new(seed);
        let global = plain_global(l, vec![l], &mut root.derive(&[1]).rng());
        let mut updates = Vec::new();
        for j in 0..clients {
            let mut rng = root.derive(&[2, j as u64]).rng();
            let (u, _) = factor_update(&global, None, j, 0, true, &mut rng);
            updates.push(u);
        }
        let state = AggregationState::new(0, global.clone());
        let merged = aggregate_fedhm(&state, &updates, clients + extra).unwrap();
        assert_bitwise_equal(&merged, &global)?;
    }

    #[test]
    fn exitdepth_merge_stays_in_hull_and_is_order_independent(
        seed in any::<u64>(),
        l in 2usize..=3,
        raw_exit in 1usize..=2,
        strongs in prop::collection::vec(any::<bool>(), 1..=5),
        extra in 0usize..=3,
    ) {
        let exit_layer = raw_exit.min(l - 1);
        let root = Splitter::new(seed);
        let global = plain_global(l, vec![exit_layer, l], &mut root.derive(&[1]).rng());
        let round = (seed % 23) as usize;
        let mut updates = Vec::new();
        let mut oracles = Vec::new();
        for (j, &strong) in strongs.iter().enumerate() {
            let mut rng = root.derive(&[2, j as u64]).rng();
            let (u, o) = exitdepth_update(&global, exit_layer, strong, j, round, false, &mut rng);
            updates.push(u);
            oracles.push(o);
        }
        let n = strongs.len() + extra;
        let state = AggregationState::new(round, global.clone());
        let merged = aggregate_depthfl(&state, &updates, n).unwrap();
        assert_hull(&global, &merged, &oracles)?;
        updates.reverse();
        let again = aggregate_depthfl(&state, &updates, n).unwrap();
        assert_bitwise_equal(&merged, &again)?;
    }

    #[test]
    fn exitdepth_echoes_are_bitwise_fixed_points(
        seed in any::<u64>(),
        l in 2usize..=3,
        raw_exit in 1usize..=2,
        strongs in prop::collection::vec(any::<bool>(), 1..=5),
        extra in 0usize..=3,
    ) {
        let exit_layer = raw_exit.min(l - 1);
        let root = Splitter::new(seed);
        let global = plain_global(l, vec![exit_layer, l], &mut root.derive(&[1]).rng());
        let mut updates = Vec::new();
        for (j, &strong) in strongs.iter().enumerate() {
            let mut rng = root.derive(&[2, j as u64]).rng();
            let (u, _) = exitdepth_update(&global, exit_layer, strong, j, 0, true, &mut rng);
            updates.push(u);
        }
        let state = AggregationState::new(0, global.clone());
        let merged = aggregate_depthfl(&state, &updates, strongs.len() + extra).unwrap();
        assert_bitwise_equal(&merged, &global)?;
    }

    #[test]
    fn payload_bytes_match_upload_predictions(
        seed in any::<u64>(),
        l in 1usize..=3,
        raw_t in 1usize..=3,
        z in 1usize..=8,
        s_idx in 0usize..=4,
        strong in any::<bool>(),
    ) {
        let arch = tiny(l);
        let t = raw_t.min(l);
        let shape = TrainingShape::new(1, 8, 1).unwrap();
        let root = Splitter::new(seed);
        let mut rng = root.derive(&[1]).rng();
        let global = plain_global(l, vec![l], &mut rng);

        let (u, _) = depth_update(&global, l, t, 0, 0, false, &mut rng);
        let cfg = TrainingConfiguration::new(arch, t).unwrap();
        prop_assert_eq!(u.upload_bytes, layerft_cost(&cfg, &shape).resource.upload_bytes);

        let lora_store = adapter_global(l, 8, &mut rng);
        let (u, _) = adapter_update(&lora_store, z, 0, 0, false, &mut rng);
        let predicted = lora_cost(&arch, z, &shape).unwrap();
        prop_assert_eq!(u.upload_bytes, predicted.resource.upload_bytes);

        let s = [0.25, 0.375, 0.5, 0.75, 1.0][s_idx];
        let spec = heterofl_subset(&arch, s).unwrap();
        let (u, _) = width_update(&global, spec, 0, 0, false, &mut rng);
        let predicted = subset_cost(&arch, s, &shape).unwrap();
        prop_assert_eq!(u.upload_bytes, predicted.resource.upload_bytes);

        let (u, _) = factor_update(&global, Some(z), 0, 0, false, &mut rng);
        let predicted = lowrank_cost(&arch, z, &shape).unwrap();
        prop_assert_eq!(u.upload_bytes, predicted.resource.upload_bytes);

        let (u, _) = factor_update(&global, None, 0, 0, false, &mut rng);
        let full_cfg = TrainingConfiguration::new(arch, l).unwrap();
        prop_assert_eq!(u.upload_bytes, layerft_cost(&full_cfg, &shape).resource.upload_bytes);

        if l >= 2 {
            let exit_layer = 1 + (z - 1) % (l - 1);
            let exit_store = plain_global(l, vec![exit_layer, l], &mut rng);
            let (u, _) = exitdepth_update(&exit_store, exit_layer, strong, 0, 0, false, &mut rng);
            let predicted = earlyexit_cost(&arch, exit_layer, strong, &shape).unwrap();
            prop_assert_eq!(u.upload_bytes, predicted.resource.upload_bytes);
        }
    }
}

#[test]
fn rolling_windows_sweep_the_full_width_every_cycle() {
    for q in [4usize, 8, 16] {
        for s in [0.25f64, 0.5, 1.0] {
            let w = (s * q as f64).floor() as usize;
            let prefix = heterofl_index_set(s, q).unwrap();
            assert_eq!(prefix, (0..w).collect::<Vec<_>>());
            for r in 0..=3 * q {
                let set = fedrolex_index_set(r, s, q).unwrap();
                assert_eq!(set.len(), w, "round {r} scale {s} width {q}");
                for (k, &i) in set.iter().enumerate() {
                    assert_eq!(i, (r % q + k) % q, "round {r} scale {s} width {q}");
                }
            }
            for base in 0..q {
                let mut seen = vec![false; q];
                for r in base..base + q {
                    for i in fedrolex_index_set(r, s, q).unwrap() {
                        seen[i] = true;
                    }
                }
                assert!(
                    seen.iter().all(|&b| b),
                    "cycle starting at {base} missed width indices"
                );
            }
        }
    }
}
