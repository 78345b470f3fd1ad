use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, GradStore, ParamStore};

/// Hyper-parameters of decayed Adagrad.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdagradConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Multiplier applied to the squared-gradient accumulator before each update.
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for AdagradConfig {
    fn default() -> Self {
        AdagradConfig {
            learning_rate: 1e-5,
            weight_decay: 1.6e-3,
            decay: 0.95,
            epsilon: 1e-6,
        }
    }
}

/// Per-parameter accumulators for decayed Adagrad.
#[derive(Clone, Debug)]
pub struct Adagrad {
    pub config: AdagradConfig,
    accum: Vec<Vec<f64>>,
}

impl Adagrad {
    pub fn new(config: AdagradConfig, params: &ParamStore) -> Self {
        Adagrad {
            config,
            accum: params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn accumulator(&self, index: usize) -> &[f64] {
        &self.accum[index]
    }

    /// One update of every trainable parameter that received gradient:
    /// `g' = g + wd·θ`, `acc = decay·acc + g'²`, `θ -= lr·g'/(√acc + ε)`.
    ///
    /// Parameters whose gradient is identically zero (unreachable from the
    /// loss) are left alone, decay included. Nothing is modified when any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<(), AutodiffError> {
        if grads.len() != params.len() || self.accum.len() != params.len() {
            return Err(AutodiffError::StoreLayout);
        }
        for id in params.ids() {
            if params.is_trainable(id) && grads.get(id).iter().any(|g| !g.is_finite()) {
                return Err(AutodiffError::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        let AdagradConfig {
            learning_rate: lr,
            weight_decay: wd,
            decay,
            epsilon: eps,
        } = self.config;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !params.is_trainable(id) || grads.is_zero(id) {
                continue;
            }
            let g = grads.get(id);
            let acc = &mut self.accum[id.index()];
            let theta = params.get_mut(id).data_mut();
            for i in 0..theta.len() {
                let gi = g[i] + wd * theta[i];
                acc[i] = decay * acc[i] + gi * gi;
                theta[i] -= lr * gi / (libm::sqrt(acc[i]) + eps);
            }
        }
        Ok(())
    }
}
