//! Finite-difference verification of the analytic backward pass.
//!
//! Central differences with a fixed probe step, evaluated in double
//! precision on tiny models. The error measure is relative to the
//! larger of the two gradient magnitudes with a unit floor, which sits
//! at the natural scale of a mean cross-entropy loss.

use rand::Rng;

use crate::error::Result;
use crate::nn::model::{Batch, Counters, Model};
use crate::rng::Splitter;

const PROBE_EPS: f64 = 1e-3;

/// Maximum relative error between analytic and central-difference
/// gradients over `samples` uniformly sampled trained coordinates.
pub fn grad_check(model: &mut Model<f64>, batch: &Batch, samples: usize, seed: u64) -> Result<f64> {
    let mut counters = Counters::default();
    let mut step_rng = Splitter::new(seed).derive(&[0x67636b30]).rng();
    let step = model.train_step(batch, 0.0, &mut step_rng, &mut counters)?;

    let trained = model.trained_names();
    let sizes: Vec<usize> = trained.iter().map(|n| model.params.get(n).len()).collect();
    let total: usize = sizes.iter().sum();
    assert!(total > 0, "no trained coordinates to sample");

    let mut pick = Splitter::new(seed).derive(&[0x67636b31]).rng();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut flat = pick.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let name = &trained[which];
        let analytic = step.grads.get(name).data()[flat];

        let original = model.params.get(name).data()[flat];
        model.params.get_mut(name).data_mut()[flat] = original + PROBE_EPS;
        let plus = model.forward_loss(batch)?;
        model.params.get_mut(name).data_mut()[flat] = original - PROBE_EPS;
        let minus = model.forward_loss(batch)?;
        model.params.get_mut(name).data_mut()[flat] = original;

        let numeric = (plus - minus) / (2.0 * PROBE_EPS);
        let denom = analytic.abs().max(numeric.abs()).max(1.0);
        let err = (analytic - numeric).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchitectureDescriptor;
    use crate::nn::model::{Model, ModelDims, Variant};

    fn toy_batch(vocab: usize, seed: u64) -> Batch {
        use rand::Rng;
        let mut rng = Splitter::new(seed).rng();
        Batch {
            batch: 2,
            ctx: 8,
            inputs: (0..16).map(|_| rng.random_range(0..vocab as u32)).collect(),
            targets: (0..16).map(|_| rng.random_range(0..vocab as u32)).collect(),
        }
    }

    fn check(variant: Variant, exits: Vec<usize>, layers: usize) -> f64 {
        let arch = ArchitectureDescriptor::tiny(layers);
        let dims = ModelDims::from_arch(&arch);
        let mut model = Model::<f64>::init(dims, variant, exits, 71).unwrap();
        let batch = toy_batch(dims.vocab, 72);
        grad_check(&mut model, &batch, 60, 73).unwrap()
    }

    #[test]
    fn plain_full_training_gradients_verify() {
        let err = check(Variant::full(), vec![2], 2);
        assert!(err <= 1e-5, "max rel err {err}");
    }

    #[test]
    fn frozen_lower_layer_gradients_verify() {
        let err = check(Variant::last_layers(2, 1), vec![2], 2);
        assert!(err <= 1e-5, "max rel err {err}");
    }

    #[test]
    fn adapter_gradients_verify() {
        let err = check(Variant::Lora { rank: 2 }, vec![2], 2);
        assert!(err <= 1e-5, "max rel err {err}");
    }

    #[test]
    fn factor_pair_gradients_verify() {
        let err = check(Variant::Factored { rank: 4 }, vec![2], 2);
        assert!(err <= 1e-5, "max rel err {err}");
    }

    #[test]
    fn two_exit_gradients_verify() {
        let err = check(Variant::full(), vec![1, 2], 2);
        assert!(err <= 1e-5, "max rel err {err}");
    }

    #[test]
    fn embedding_training_gradients_verify() {
        // Embedding coordinates feed every downstream block, so the
        // fixed probe step carries more truncation error than for the
        // federated modes; the bound here is correspondingly looser.
        let err = check(
            Variant::Plain {
                first_trained: 0,
                train_embeddings: true,
            },
            vec![2],
            2,
        );
        assert!(err <= 1e-4, "max rel err {err}");
    }
}
