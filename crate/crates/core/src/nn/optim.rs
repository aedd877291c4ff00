//! AdamW with decoupled weight decay and a cosine learning-rate
//! schedule.
//!
//! Moments are created lazily per gradient tensor, so state exists for
//! exactly the trained parameters. Weight decay applies to matrices
//! (rank ≥ 2 tensors: linear weights, adapter/factor matrices,
//! embedding tables) and never to norm gains or biases.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::model::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerSpec {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Cosine decay from `lr_start` (step 0) to `lr_end` (step `total`).
pub fn cosine_lr(step: usize, total: usize, lr_start: f64, lr_end: f64) -> f64 {
    if total == 0 {
        return lr_start;
    }
    let frac = step as f64 / total as f64;
    lr_end + (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

pub struct AdamW<S> {
    spec: OptimizerSpec,
    step: u32,
    moments: BTreeMap<String, (Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(spec: OptimizerSpec) -> Self {
        AdamW {
            spec,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Number of moment scalars currently held (2 per trained scalar).
    pub fn state_scalars(&self) -> u64 {
        self.moments
            .values()
            .map(|(m, v)| (m.len() + v.len()) as u64)
            .sum()
    }

    /// One update over exactly the gradient's tensors.
    pub fn step(
        &mut self,
        params: &mut ParamStore<S>,
        grads: &ParamStore<S>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let spec = self.spec;
        let bc1 = 1.0 - spec.beta1.powi(t);
        let bc2 = 1.0 - spec.beta2.powi(t);
        let b1 = S::from_f64(spec.beta1);
        let b2 = S::from_f64(spec.beta2);
        let one_m_b1 = S::from_f64(1.0 - spec.beta1);
        let one_m_b2 = S::from_f64(1.0 - spec.beta2);
        let inv_bc1 = S::from_f64(1.0 / bc1);
        let inv_bc2 = S::from_f64(1.0 / bc2);
        let eps = S::from_f64(spec.eps);
        let lr_s = S::from_f64(lr);
        for (name, g) in grads.iter() {
            let p = params
                .try_get(name)
                .ok_or_else(|| Error::shape(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let decay = if p.shape().len() >= 2 {
                S::from_f64(spec.weight_decay)
            } else {
                S::zero()
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape().to_vec()), Tensor::zeros(g.shape().to_vec())));
            let p = params.get_mut(name);
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = b1 * *mv + one_m_b1 * gv;
                *vv = b2 * *vv + one_m_b2 * gv * gv;
                let m_hat = *mv * inv_bc1;
                let v_hat = *vv * inv_bc2;
                *pv -= lr_s * (m_hat / (v_hat.sqrt() + eps) + decay * *pv);
            }
        }
        Ok(())
    }
}
