use serde::{Deserialize, Serialize};

use crate::nn::model::{FreezeMask, Grads, Network};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Classical momentum SGD with additive L2 weight decay.
    Sgdm,
    /// Adam moments with decoupled weight decay.
    Adamw,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgdm" => Ok(Self::Sgdm),
            "adamw" => Ok(Self::Adamw),
            other => Err(format!("unknown optimizer `{other}` (sgdm | adamw)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgdm => "sgdm",
            Self::Adamw => "adamw",
        })
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimHyper {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Optimizer buffers, lazily sized per parameter.
#[derive(Debug, Clone, Default)]
pub struct OptState<T> {
    pub step: u64,
    first: Vec<Option<Vec<T>>>,
    second: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> OptState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update to every trainable, unfrozen parameter that has a gradient.
    pub fn apply(
        &mut self,
        net: &mut Network<T>,
        grads: &Grads<T>,
        mask: Option<&FreezeMask>,
        lr: f64,
        hyper: OptimHyper,
    ) {
        let count = net.params().len();
        if self.first.len() != count {
            self.first = vec![None; count];
            self.second = vec![None; count];
        }
        self.step += 1;
        let lr_t: T = lit(lr);
        let wd: T = lit(hyper.weight_decay);
        let mu: T = lit(hyper.momentum);
        let b1: T = lit(ADAM_BETA1);
        let b2: T = lit(ADAM_BETA2);
        let eps: T = lit(ADAM_EPS);
        let bc1: T = lit(1.0 - ADAM_BETA1.powi(self.step as i32));
        let bc2: T = lit(1.0 - ADAM_BETA2.powi(self.step as i32));

        for i in 0..count {
            if !net.is_trainable(i) || mask.is_some_and(|m| m.frozen[i]) {
                continue;
            }
            let Some(g) = grads.per_param[i].as_ref() else { continue };
            let w = net.params_mut()[i].data_mut();
            match hyper.kind {
                OptimizerKind::Sgdm => {
                    let v = self.first[i].get_or_insert_with(|| vec![T::zero(); w.len()]);
                    for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                        *vi = mu * *vi + gi + wd * *wi;
                        *wi -= lr_t * *vi;
                    }
                }
                OptimizerKind::Adamw => {
                    let m = self.first[i].get_or_insert_with(|| vec![T::zero(); w.len()]);
                    let v = self.second[i].get_or_insert_with(|| vec![T::zero(); w.len()]);
                    for (((wi, &gi), mi), vi) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + (T::one() - b1) * gi;
                        *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *wi -= lr_t * wd * *wi;
                        *wi -= lr_t * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Step-halving learning rate: `lr0 * 0.5^floor(epoch / period)`.
pub fn lr_schedule(lr0: f64, epoch: usize, period: usize) -> f64 {
    assert!(period >= 1, "schedule period must be at least 1");
    lr0 * 0.5f64.powi((epoch / period) as i32)
}
