//! Loss, dropout, and the Adam and Adadelta optimizers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Mean cross-entropy of `labels` under row-wise probabilities `[R × k]`.
/// Probabilities are floored at `1e-12` before the logarithm.
pub fn cross_entropy(g: &Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let k = *g.shape(probs).last().unwrap_or(&0);
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Contract(format!("label {y} outside {k} classes")));
    }
    g.nll(probs, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 − rate)`; evaluation is the
/// identity.
pub fn dropout(g: &Graph, x: Var, rate: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x);
    let n = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    g.hadamard(x, g.constant(Tensor::new(shape, mask)?))
}

/// A dropout rate, mode and random stream bundled for use inside a forward
/// pass.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    pub mode: Mode,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, mode: Mode, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Dropout {
            rate,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Identity in every call.
    pub fn off() -> Self {
        Dropout {
            rate: 0.0,
            mode: Mode::Eval,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn apply(&mut self, g: &Graph, x: Var) -> Result<Var> {
        dropout(g, x, self.rate, self.mode, &mut self.rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub eps: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        AdadeltaConfig { rho: 0.95, eps: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Adam(AdamConfig),
    Adadelta(AdadeltaConfig),
}

fn check_shapes(params: &ParamStore, grads: &ParamGrads) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for id in params.ids() {
        if let Some(gr) = grads.get(id) {
            if gr.len() != params.get(id).numel() {
                return Err(Error::Contract(format!(
                    "gradient for {} has {} entries, parameter has {}",
                    params.name(id),
                    gr.len(),
                    params.get(id).numel()
                )));
            }
        }
    }
    Ok(())
}

/// Bias-corrected Adam. A parameter without a gradient is treated as having
/// a zero gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        check_shapes(params, grads)?;
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in params.ids() {
            let k = id.index();
            let gr = grads.get(id);
            let theta = params.get_mut(id).data_mut();
            for e in 0..theta.len() {
                let gv = gr.map_or(0.0, |g| g[e]);
                self.m[k][e] = beta1 * self.m[k][e] + (1.0 - beta1) * gv;
                self.v[k][e] = beta2 * self.v[k][e] + (1.0 - beta2) * gv * gv;
                let m_hat = self.m[k][e] / bc1;
                let v_hat = self.v[k][e] / bc2;
                theta[e] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Adadelta: `Δ = −√(E[Δ²] + ε) / √(E[g²] + ε) · g`, no learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adadelta {
    pub cfg: AdadeltaConfig,
    pub step: u64,
    pub acc_grad: Vec<Vec<f64>>,
    pub acc_update: Vec<Vec<f64>>,
}

impl Adadelta {
    pub fn new(params: &ParamStore, cfg: AdadeltaConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adadelta {
            cfg,
            step: 0,
            acc_grad: zeros.clone(),
            acc_update: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        check_shapes(params, grads)?;
        self.step += 1;
        let AdadeltaConfig { rho, eps } = self.cfg;
        for id in params.ids() {
            let k = id.index();
            let gr = grads.get(id);
            let theta = params.get_mut(id).data_mut();
            for e in 0..theta.len() {
                let gv = gr.map_or(0.0, |g| g[e]);
                let eg = rho * self.acc_grad[k][e] + (1.0 - rho) * gv * gv;
                let delta = -(self.acc_update[k][e] + eps).sqrt() / (eg + eps).sqrt() * gv;
                self.acc_grad[k][e] = eg;
                self.acc_update[k][e] = rho * self.acc_update[k][e] + (1.0 - rho) * delta * delta;
                theta[e] += delta;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Adam(Adam),
    Adadelta(Adadelta),
}

/// Flat optimizer state for checkpoints: hyperparameters, step counter and
/// two per-parameter accumulator arrays each.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(params: &ParamStore, cfg: OptimizerConfig) -> Self {
        match cfg {
            OptimizerConfig::Adam(c) => Optimizer::Adam(Adam::new(params, c)),
            OptimizerConfig::Adadelta(c) => Optimizer::Adadelta(Adadelta::new(params, c)),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        match self {
            Optimizer::Adam(o) => o.step(params, grads),
            Optimizer::Adadelta(o) => o.step(params, grads),
        }
    }

    pub fn config(&self) -> OptimizerConfig {
        match self {
            Optimizer::Adam(o) => OptimizerConfig::Adam(o.cfg),
            Optimizer::Adadelta(o) => OptimizerConfig::Adadelta(o.cfg),
        }
    }

    pub fn export(&self) -> OptimizerState {
        match self {
            Optimizer::Adam(o) => OptimizerState {
                config: self.config(),
                step: o.step,
                first: o.m.clone(),
                second: o.v.clone(),
            },
            Optimizer::Adadelta(o) => OptimizerState {
                config: self.config(),
                step: o.step,
                first: o.acc_grad.clone(),
                second: o.acc_update.clone(),
            },
        }
    }

    pub fn import(params: &ParamStore, state: OptimizerState) -> Result<Self> {
        let sizes: Vec<usize> = params.iter().map(|(_, t)| t.numel()).collect();
        let fits = |a: &[Vec<f64>]| a.len() == sizes.len() && a.iter().zip(&sizes).all(|(v, &n)| v.len() == n);
        if !fits(&state.first) || !fits(&state.second) {
            return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
        }
        Ok(match state.config {
            OptimizerConfig::Adam(cfg) => Optimizer::Adam(Adam {
                cfg,
                step: state.step,
                m: state.first,
                v: state.second,
            }),
            OptimizerConfig::Adadelta(cfg) => Optimizer::Adadelta(Adadelta {
                cfg,
                step: state.step,
                acc_grad: state.first,
                acc_update: state.second,
            }),
        })
    }
}
