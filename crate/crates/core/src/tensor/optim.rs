use super::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?} (expected adam or sgd)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct MomentBuffers {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl MomentBuffers {
    pub fn zeros(len: usize) -> Self {
        MomentBuffers {
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update; `step` counts from 1.
pub fn adam_step(
    param: &mut Tensor,
    grad: &[f64],
    moments: &mut MomentBuffers,
    lr: f64,
    hp: AdamParams,
    step: u64,
) -> Result<()> {
    let n = param.numel();
    if grad.len() != n || moments.first.len() != n || moments.second.len() != n {
        return Err(Error::dim("adam_step", param.shape(), &[grad.len()]));
    }
    if !(lr > 0.0) || step == 0 {
        return Err(Error::Contract(format!(
            "adam_step needs lr > 0 and step >= 1 (lr={lr}, step={step})"
        )));
    }
    let bc1 = 1.0 - hp.beta1.powi(step as i32);
    let bc2 = 1.0 - hp.beta2.powi(step as i32);
    let data = param.data_mut();
    for i in 0..n {
        let g = grad[i];
        let m = hp.beta1 * moments.first[i] + (1.0 - hp.beta1) * g;
        let v = hp.beta2 * moments.second[i] + (1.0 - hp.beta2) * g * g;
        moments.first[i] = m;
        moments.second[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

pub fn sgd_step(param: &mut Tensor, grad: &[f64], lr: f64) -> Result<()> {
    if grad.len() != param.numel() {
        return Err(Error::dim("sgd_step", param.shape(), &[grad.len()]));
    }
    for (p, g) in param.data_mut().iter_mut().zip(grad) {
        *p -= lr * g;
    }
    Ok(())
}

/// Optimizer state for a fixed, ordered list of parameter tensors.
#[derive(Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    hp: AdamParams,
    step: u64,
    moments: Vec<MomentBuffers>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, sizes: &[usize]) -> Self {
        let moments = match kind {
            OptimizerKind::Adam => sizes.iter().map(|&n| MomentBuffers::zeros(n)).collect(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Optimizer {
            kind,
            lr,
            hp: AdamParams::default(),
            step: 0,
            moments,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Changes the learning rate for subsequent steps, e.g. for a schedule.
    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter; `grads[i]` belongs to `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "optimizer got {} params but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Adam => {
                if self.moments.len() != params.len() {
                    return Err(Error::Contract(format!(
                        "optimizer built for {} params, stepped with {}",
                        self.moments.len(),
                        params.len()
                    )));
                }
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.moments) {
                    adam_step(p, g, m, self.lr, self.hp, self.step)?;
                }
            }
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    sgd_step(p, g, self.lr)?;
                }
            }
        }
        Ok(())
    }
}
