//! First-order optimizers over flat parameter slices.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    /// Heavy-ball momentum: `v <- mu v + g`, `theta <- theta - lr v`.
    SgdMomentum { learning_rate: f64, momentum: f64 },
    /// Adam with bias correction.
    Adam { learning_rate: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn sgd_momentum(learning_rate: f64, momentum: f64) -> Self {
        OptimizerConfig::SgdMomentum { learning_rate, momentum }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig::Adam { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerConfig::SgdMomentum { learning_rate, .. } | OptimizerConfig::Adam { learning_rate, .. } => {
                learning_rate
            }
        }
    }

    /// A learning rate of exactly zero is accepted and freezes the parameters.
    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(invalid(alloc::format!("learning rate must be finite and >= 0, got {lr}")));
        }
        let unit = |name: &str, x: f64| {
            if (0.0..1.0).contains(&x) {
                Ok(())
            } else {
                Err(invalid(alloc::format!("{name} must lie in [0, 1), got {x}")))
            }
        };
        match *self {
            OptimizerConfig::SgdMomentum { momentum, .. } => unit("momentum", momentum),
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
                if !(eps.is_finite() && eps > 0.0) {
                    return Err(invalid(alloc::format!("eps must be > 0, got {eps}")));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum State {
    Momentum { velocity: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64>, beta1_pow: f64, beta2_pow: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    state: State,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, n_params: usize) -> Result<Self> {
        cfg.validate()?;
        let state = match cfg {
            OptimizerConfig::SgdMomentum { .. } => State::Momentum { velocity: vec![0.0; n_params] },
            OptimizerConfig::Adam { .. } => {
                State::Adam { m: vec![0.0; n_params], v: vec![0.0; n_params], beta1_pow: 1.0, beta2_pow: 1.0 }
            }
        };
        Ok(Self { cfg, state, steps: 0 })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Momentum buffer, for SGD only.
    pub fn velocity(&self) -> Option<&[f64]> {
        match &self.state {
            State::Momentum { velocity } => Some(velocity),
            State::Adam { .. } => None,
        }
    }

    /// Applies one update in place. Rejects non-finite gradients without
    /// touching any state.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let n = match &self.state {
            State::Momentum { velocity } => velocity.len(),
            State::Adam { m, .. } => m.len(),
        };
        if params.len() != n || grads.len() != n {
            return Err(invalid(alloc::format!(
                "optimizer holds {n} parameters, got params={} grads={}",
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        match (&mut self.state, self.cfg) {
            (State::Momentum { velocity }, OptimizerConfig::SgdMomentum { learning_rate, momentum }) => {
                for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
                    *v = momentum * *v + g;
                    *p -= learning_rate * *v;
                }
            }
            (
                State::Adam { m, v, beta1_pow, beta2_pow },
                OptimizerConfig::Adam { learning_rate, beta1, beta2, eps },
            ) => {
                *beta1_pow *= beta1;
                *beta2_pow *= beta2;
                let c1 = 1.0 / (1.0 - *beta1_pow);
                let c2 = 1.0 / (1.0 - *beta2_pow);
                for (((p, mi), vi), &g) in params.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads) {
                    *mi = beta1 * *mi + (1.0 - beta1) * g;
                    *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                    *p -= learning_rate * (*mi * c1) / (math::sqrt(*vi * c2) + eps);
                }
            }
            _ => unreachable!("state always matches config"),
        }
        self.steps += 1;
        Ok(())
    }
}
