//! Corpus handling: character tokenization, client partitioning
//! (contiguous equal shares, Dirichlet non-IID, constraint-correlated),
//! window sampling, and a synthetic sequence-classification task.
//!
//! The classification task is realized as language modeling: an example
//! is a token window whose final prediction target is one of the
//! reserved label tokens at the top of the character table, so the same
//! model, loss and head serve both tasks.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::arch::largest_remainder_counts;
use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng::Splitter;

/// Fixed character table size; token ids are ASCII code points.
pub const CHAR_TABLE: usize = 128;
/// Characters outside the table map to ASCII SUB (26).
pub const UNKNOWN_ID: u32 = 26;

/// One labeled sequence example for the classification task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub tokens: Vec<u32>,
    pub label: usize,
}

/// Character-level tokenization over the fixed 128-symbol table.
pub fn tokenize_char(text: &str) -> Vec<u32> {
    text.chars()
        .map(|c| {
            let cp = c as u32;
            if cp < CHAR_TABLE as u32 {
                cp
            } else {
                UNKNOWN_ID
            }
        })
        .collect()
}

/// Inverse of [`tokenize_char`] for in-table ids.
pub fn detokenize_char(ids: &[u32]) -> Result<String> {
    ids.iter()
        .map(|&id| {
            if id < CHAR_TABLE as u32 {
                Ok(char::from_u32(id).expect("ASCII code point"))
            } else {
                Err(Error::format(format!("token id {id} outside character table")))
            }
        })
        .collect()
}

/// Splits a token stream into `n` contiguous shards whose lengths differ
/// by at most one (earlier shards take the remainder).
pub fn partition_equal(tokens: &[u32], n: usize) -> Result<Vec<Vec<u32>>> {
    if n == 0 {
        return Err(Error::config("client count must be positive"));
    }
    if tokens.len() < n {
        return Err(Error::config(format!(
            "corpus of {} tokens cannot cover {n} clients",
            tokens.len()
        )));
    }
    let base = tokens.len() / n;
    let rem = tokens.len() % n;
    let mut shards = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let len = base + usize::from(i < rem);
        shards.push(tokens[start..start + len].to_vec());
        start += len;
    }
    Ok(shards)
}

/// One Dirichlet(α·1) draw over `n` components via normalized Gamma
/// samples.
fn dirichlet_proportions(n: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated by caller");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        // At very small alpha all draws can underflow to zero; redraw.
        if sum > 0.0 && sum.is_finite() {
            return draws.iter().map(|d| d / sum).collect();
        }
    }
}

/// Label-skewed partition: for each class, client shares are drawn from
/// Dirichlet(α·1) and the class's examples are dealt out by
/// largest-remainder rounding. Returns example indices per client
/// (disjoint, covering).
pub fn partition_dirichlet(
    labels: &[usize],
    num_classes: usize,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if alpha <= 0.0 {
        return Err(Error::config(format!("Dirichlet alpha {alpha} must be > 0")));
    }
    if n_clients == 0 {
        return Err(Error::config("client count must be positive"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::config(format!(
                "label {label} outside the {num_classes}-class range"
            )));
        }
        by_class[label].push(i);
    }
    if by_class.iter().any(|c| c.is_empty()) {
        return Err(Error::config("every class needs at least one example"));
    }

    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for (class, mut examples) in by_class.into_iter().enumerate() {
        let mut rng = Splitter::new(seed)
            .derive(&[0x64697269, class as u64])
            .rng();
        let shares = dirichlet_proportions(n_clients, alpha, &mut rng);
        let counts = largest_remainder_counts(&shares, examples.len());
        examples.shuffle(&mut rng);
        let mut cursor = 0;
        for (client, &count) in counts.iter().enumerate() {
            shards[client].extend_from_slice(&examples[cursor..cursor + count]);
            cursor += count;
        }
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    Ok(shards)
}

/// Constraint-correlated partition: classes are split into
/// group-affiliated halves (lower class ids → first group), each class's
/// examples are dealt by Dirichlet(α) over its group's devices only.
/// Returns per-device example indices plus the first group's class
/// occurrence distribution (used to weight fairness metrics toward the
/// weak group's classes).
pub fn partition_constraint_correlated(
    labels: &[usize],
    num_classes: usize,
    groups: [&[usize]; 2],
    alpha: f64,
    seed: u64,
) -> Result<(Vec<Vec<usize>>, Vec<f64>)> {
    if num_classes < 2 {
        return Err(Error::config("need at least one class per group"));
    }
    if groups[0].is_empty() || groups[1].is_empty() {
        return Err(Error::config("both device groups must be non-empty"));
    }
    let n_devices = groups[0].len() + groups[1].len();
    for &d in groups[0].iter().chain(groups[1]) {
        if d >= n_devices {
            return Err(Error::config(format!(
                "device id {d} outside the contiguous range 0..{n_devices}"
            )));
        }
    }
    let split = num_classes.div_ceil(2);

    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n_devices];
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::config(format!(
                "label {label} outside the {num_classes}-class range"
            )));
        }
        by_class[label].push(i);
    }
    if by_class.iter().any(|c| c.is_empty()) {
        return Err(Error::config("every class needs at least one example"));
    }

    let mut weak_class_counts = vec![0usize; num_classes];
    for (class, mut examples) in by_class.into_iter().enumerate() {
        let members: &[usize] = if class < split { groups[0] } else { groups[1] };
        if class < split {
            weak_class_counts[class] = examples.len();
        }
        let mut rng = Splitter::new(seed)
            .derive(&[0x636f7272, class as u64])
            .rng();
        let shares = dirichlet_proportions(members.len(), alpha, &mut rng);
        let counts = largest_remainder_counts(&shares, examples.len());
        examples.shuffle(&mut rng);
        let mut cursor = 0;
        for (&device, &count) in members.iter().zip(&counts) {
            shards[device].extend_from_slice(&examples[cursor..cursor + count]);
            cursor += count;
        }
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    let weak_total: usize = weak_class_counts.iter().sum();
    let p_weak: Vec<f64> = weak_class_counts
        .iter()
        .map(|&c| c as f64 / weak_total as f64)
        .collect();
    Ok((shards, p_weak))
}

/// Uniformly random contiguous window: `t` input tokens and their
/// shifted-by-one targets.
pub fn sample_window(shard: &[u32], t: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<u32>, Vec<u32>)> {
    if shard.len() < t + 1 {
        return Err(Error::config(format!(
            "shard of {} tokens is too short for windows of {t}+1",
            shard.len()
        )));
    }
    let start = rng.random_range(0..=shard.len() - t - 1);
    Ok((
        shard[start..start + t].to_vec(),
        shard[start + 1..start + t + 1].to_vec(),
    ))
}

/// Builds a language-model batch of random windows from one shard.
pub fn lm_batch(shard: &[u32], batch: usize, ctx: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let mut inputs = Vec::with_capacity(batch * ctx);
    let mut targets = Vec::with_capacity(batch * ctx);
    for _ in 0..batch {
        let (x, y) = sample_window(shard, ctx, rng)?;
        inputs.extend(x);
        targets.extend(y);
    }
    Ok(Batch {
        batch,
        ctx,
        inputs,
        targets,
    })
}

/// First token id of the label range: the top `num_classes` ids of the
/// character table are reserved as label tokens.
pub fn label_token_base(num_classes: usize) -> u32 {
    (CHAR_TABLE - num_classes) as u32
}

/// Builds a batch from classification examples: inputs are the first
/// `ctx` tokens, targets the shifted sequence terminated by the
/// example's label token.
pub fn classification_batch(
    examples: &[LabeledExample],
    ids: &[usize],
    num_classes: usize,
    ctx: usize,
) -> Result<Batch> {
    if ids.is_empty() {
        return Err(Error::config("empty batch of classification examples"));
    }
    let base = label_token_base(num_classes);
    let mut inputs = Vec::with_capacity(ids.len() * ctx);
    let mut targets = Vec::with_capacity(ids.len() * ctx);
    for &id in ids {
        let ex = examples
            .get(id)
            .ok_or_else(|| Error::config(format!("example index {id} out of range")))?;
        if ex.tokens.len() != ctx {
            return Err(Error::shape(format!(
                "example has {} tokens, expected {ctx}",
                ex.tokens.len()
            )));
        }
        inputs.extend_from_slice(&ex.tokens);
        targets.extend_from_slice(&ex.tokens[1..]);
        targets.push(base + ex.label as u32);
    }
    Ok(Batch {
        batch: ids.len(),
        ctx,
        inputs,
        targets,
    })
}

/// Synthetic classification corpus: class `k` draws symbols mostly from
/// its own band of the printable range, with a small uniform mixture.
/// Labels are balanced by construction and generation is deterministic
/// in the seed.
pub fn gen_synth_classification(
    num_classes: usize,
    per_class: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if num_classes < 2 {
        return Err(Error::config("need at least two classes"));
    }
    if per_class == 0 || seq_len < 2 {
        return Err(Error::config("need examples and sequence length ≥ 2"));
    }
    // Printable symbols, leaving the top of the table for label tokens.
    let lo = 32u32;
    let hi = label_token_base(num_classes);
    let span = (hi - lo) as usize;
    if span < num_classes {
        return Err(Error::config("symbol range too small for class bands"));
    }
    let band = span / num_classes;
    let mut examples = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let band_lo = lo + (class * band) as u32;
        let band_hi = band_lo + band as u32;
        let mut rng = Splitter::new(seed)
            .derive(&[0x73796e74, class as u64])
            .rng();
        for _ in 0..per_class {
            let tokens: Vec<u32> = (0..seq_len)
                .map(|_| {
                    if rng.random::<f64>() < 0.9 {
                        rng.random_range(band_lo..band_hi)
                    } else {
                        rng.random_range(lo..hi)
                    }
                })
                .collect();
            examples.push(LabeledExample {
                tokens,
                label: class,
            });
        }
    }
    Ok(examples)
}

/// Serializes labeled examples as one line per example:
/// `label<TAB>space-separated token ids`.
pub fn export_labeled(examples: &[LabeledExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&ex.label.to_string());
        out.push('\t');
        let mut first = true;
        for &t in &ex.tokens {
            if !first {
                out.push(' ');
            }
            out.push_str(&t.to_string());
            first = false;
        }
        out.push('\n');
    }
    out
}
