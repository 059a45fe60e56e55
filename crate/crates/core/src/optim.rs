//! Parameter update rules.
//!
//! - Adam: `θ ← θ − α·m̂/(√v̂ + ε)` with bias-corrected moments.
//! - RMSProp: `v ← ρv + (1−ρ)g²`, `θ ← θ − α·g/√(v + ε)`.
//! - SGD: `θ ← θ − α·g`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::ObjectiveKind;
use crate::tensor::Tensor;

pub const OPT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Rmsprop {
        lr: f64,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Sgd {
        lr: f64,
    },
}

fn default_eps() -> f64 {
    OPT_EPS
}

fn default_rho() -> f64 {
    0.9
}

impl OptimizerConfig {
    pub fn adam(lr: f64, beta1: f64, beta2: f64) -> Self {
        OptimizerConfig::Adam { lr, beta1, beta2, eps: OPT_EPS }
    }

    pub fn rmsprop(lr: f64) -> Self {
        OptimizerConfig::Rmsprop { lr, rho: 0.9, eps: OPT_EPS }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd { lr }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Rmsprop { lr, .. } | OptimizerConfig::Sgd { lr } => lr,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerConfig::Adam { .. } => "adam",
            OptimizerConfig::Rmsprop { .. } => "rmsprop",
            OptimizerConfig::Sgd { .. } => "sgd",
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("{path}.{field}"), msg));
        let lr = self.lr();
        if !(lr.is_finite() && lr > 0.0) {
            return bad("lr", "must be positive");
        }
        match *self {
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                if !(0.0..1.0).contains(&beta1) {
                    return bad("beta1", "must lie in [0, 1)");
                }
                if !(0.0..1.0).contains(&beta2) {
                    return bad("beta2", "must lie in [0, 1)");
                }
                if !(eps > 0.0) {
                    return bad("eps", "must be positive");
                }
            }
            OptimizerConfig::Rmsprop { rho, eps, .. } => {
                if !(0.0..1.0).contains(&rho) {
                    return bad("rho", "must lie in [0, 1)");
                }
                if !(eps > 0.0) {
                    return bad("eps", "must be positive");
                }
            }
            OptimizerConfig::Sgd { .. } => {}
        }
        Ok(())
    }
}

/// Default optimizer for each objective.
pub fn pair_objective_optimizer(kind: ObjectiveKind) -> OptimizerConfig {
    match kind {
        ObjectiveKind::Gan => OptimizerConfig::adam(2e-4, 0.5, 0.999),
        ObjectiveKind::Wgan => OptimizerConfig::rmsprop(1e-4),
        ObjectiveKind::WganGp => OptimizerConfig::adam(2e-4, 0.5, 0.9),
    }
}

/// Moment buffers and step counter for one parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub t: u64,
    /// First moments (Adam only).
    pub m: Vec<Tensor>,
    /// Second moments (Adam and RMSProp).
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, shapes: &[&[usize]]) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s)).collect::<Vec<_>>();
        let (m, v) = match config {
            OptimizerConfig::Adam { .. } => (zeros(), zeros()),
            OptimizerConfig::Rmsprop { .. } => (vec![], zeros()),
            OptimizerConfig::Sgd { .. } => (vec![], vec![]),
        };
        OptimizerState { config, t: 0, m, v }
    }

    pub fn for_params(config: OptimizerConfig, params: &[&Tensor]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        Self::new(config, &shapes)
    }

    /// Applies one update in place. Nothing is modified when any gradient is
    /// non-finite or mismatched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "optimizer step",
                format!("{} parameters, {} gradients", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer step",
                    format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "optimizer gradient" });
            }
        }
        let expected = match self.config {
            OptimizerConfig::Sgd { .. } => 0,
            _ => params.len(),
        };
        if self.v.len() != expected {
            return Err(Error::shape("optimizer step", "state does not match parameter list"));
        }

        self.t += 1;
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * d;
                    }
                }
            }
            OptimizerConfig::Rmsprop { lr, rho, eps } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.v) {
                    for ((x, &d), s) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *s = rho * *s + (1.0 - rho) * d * d;
                        *x -= lr * d / (*s + eps).sqrt();
                    }
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
                    for (((x, &d), mm), vv) in it {
                        *mm = beta1 * *mm + (1.0 - beta1) * d;
                        *vv = beta2 * *vv + (1.0 - beta2) * d * d;
                        let (mh, vh) = (*mm / c1, *vv / c2);
                        *x -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
