//! Global-norm gradient clipping and an adaptive-moment optimizer with
//! decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, NumericError, Tensor};

/// Named trainable tensors.
pub type Params = BTreeMap<String, Tensor>;

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
///
/// Returns the clipped gradients and the global norm measured before
/// clipping.
pub fn clip_global_norm(
    mut grads: Gradients,
    max_norm: f64,
) -> Result<(Gradients, f64), NumericError> {
    if !(max_norm > 0.0) {
        return Err(NumericError::InvalidArgument(format!(
            "max_norm must be positive, got {max_norm}"
        )));
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(NumericError::NonFiniteGradient { param: name.clone() });
    }
    let norm = grads.values().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        grads.values_mut().for_each(|g| g.scale_in_place(factor));
    }
    Ok((grads, norm))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state: per-parameter moment accumulators and a step counter.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient.
    ///
    /// Decay is applied to the parameter directly (`p -= lr * wd * p`) and is
    /// not folded into the moment estimates.
    pub fn step(&mut self, params: &mut Params, grads: &Gradients) -> Result<(), NumericError> {
        let cfg = self.config;
        if !(cfg.lr > 0.0) {
            return Err(NumericError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                cfg.lr
            )));
        }
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| NumericError::UnknownParameter(name.clone()))?;
            if p.shape() != g.shape() && p.len() != g.len() {
                return Err(NumericError::ShapeMismatch {
                    op: "optimizer_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; g.len()],
                second: vec![0.0; g.len()],
            });
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= cfg.lr * cfg.weight_decay * *pv;
                *pv -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
