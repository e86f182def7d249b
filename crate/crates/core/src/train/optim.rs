use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::numcore::Tensor;
use crate::scalar::Scalar;

/// `base · (1 + cos(π·step/total)) / 2`
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * (1.0 + (PI * t).cos()) / 2.0
}

/// Batch-norm affine parameters and biases are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains(".bn."))
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<S> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(state: &ModelState<S>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: state
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect(),
        }
    }

    /// Apply one update. Any non-finite gradient aborts before a parameter changes.
    pub fn step(&mut self, state: &mut ModelState<S>, grads: &[Tensor<S>], lr: f64) -> Result<()> {
        let params = state.params_mut();
        if grads.len() != params.len() {
            return Err(Error::dim(
                "sgd_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::dim("sgd_step", format!("gradient shape mismatch for {}", p.name)));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    location: format!("gradient of {}", p.name),
                });
            }
        }
        let mu = S::of(self.momentum);
        let lr = S::of(lr);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let wd = if decays(&p.name) { S::of(self.weight_decay) } else { S::zero() };
            for ((w, &gr), vel) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vel = mu * *vel + (gr + wd * *w);
                *w = *w - lr * *vel;
            }
        }
        Ok(())
    }
}
