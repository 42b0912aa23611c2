use crate::heads::ReidModel;

use super::grad::ModelGradients;
use super::{OptimizerKind, TrainConfig};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Plain SGD or Adam over the model's tensors, in `f64`.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        step: i32,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(config: &TrainConfig, model: &ReidModel) -> Self {
        let lr = config.learning_rate;
        match config.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => {
                let zeros: Vec<Vec<f64>> = model.parameters().iter().map(|p| vec![0.0; p.len()]).collect();
                Optimizer::Adam {
                    lr,
                    step: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    pub fn step(&mut self, model: &mut ReidModel, grads: &ModelGradients) {
        let params = model.parameters_mut();
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.into_iter().zip(&grads.tensors) {
                    for (pi, gi) in p.iter_mut().zip(g) {
                        *pi -= *lr * gi;
                    }
                }
            }
            Optimizer::Adam { lr, step, m, v } => {
                *step += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*step);
                let c2 = 1.0 - ADAM_BETA2.powi(*step);
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(&grads.tensors)
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    for k in 0..p.len() {
                        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                        let m_hat = m[k] / c1;
                        let v_hat = v[k] / c2;
                        p[k] -= *lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}
