//! Gradient-descent optimizers over named parameter lists.
//!
//! Updates are applied in canonical parameter order with fixed f64 operation
//! order, so training is bit-reproducible. State round-trips through
//! checkpoints for exact resumption.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::invalid_config(format!("unknown optimizer {other:?}"))),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Optimizer with per-parameter moment state (Adam) or none (SGD).
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub first_moment: Vec<Mat>,
    pub second_moment: Vec<Mat>,
}

impl Optimizer {
    pub fn new(
        kind: OptimizerKind,
        learning_rate: f64,
        weight_decay: f64,
        shapes: &[(usize, usize)],
    ) -> Self {
        let zeros: Vec<Mat> = shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect();
        Optimizer {
            kind,
            learning_rate,
            weight_decay,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Apply one update. `params` and `grads` must match the shapes the
    /// optimizer was built with, in the same order. Weight decay is
    /// decoupled (applied directly to the parameter).
    pub fn apply(&mut self, params: &mut [&mut Arc<Mat>], grads: &[Mat]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.first_moment.len());
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    let mat = Arc::make_mut(p);
                    for (w, gv) in mat.data.iter_mut().zip(&g.data) {
                        *w -= lr * (gv + self.weight_decay * *w);
                    }
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - BETA1.powi(self.step as i32);
                let bc2 = 1.0 - BETA2.powi(self.step as i32);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
                {
                    let mat = Arc::make_mut(p);
                    for i in 0..mat.data.len() {
                        let gv = g.data[i];
                        m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * gv;
                        v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * gv * gv;
                        let m_hat = m.data[i] / bc1;
                        let v_hat = v.data[i] / bc2;
                        mat.data[i] -=
                            lr * (m_hat / (v_hat.sqrt() + EPS) + self.weight_decay * mat.data[i]);
                    }
                }
            }
        }
    }
}
