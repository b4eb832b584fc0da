//! First-order optimizers: Adam and plain gradient descent.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    /// Moment buffers are shaped after `params`.
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &ParamStore) -> Self {
        let buffers = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let (first, second) = match kind {
            OptimizerKind::Adam { .. } => (buffers(), buffers()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            kind,
            learning_rate,
            first,
            second,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    /// Applies one update from the accumulated gradients. Gradients are left in place.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(id) = params.ids().find(|&id| params.get(id).grad().is_none()) {
            return Err(NnError::MissingGrad(params.name(id).to_string()));
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for id in params.ids() {
                    let t = params.get_mut(id);
                    let g = t.grad().expect("checked above").to_vec();
                    t.data_mut().iter_mut().zip(&g).for_each(|(p, g)| *p -= lr * g);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powf(self.step as f64);
                let bc2 = 1.0 - beta2.powf(self.step as f64);
                for (i, id) in params.ids().enumerate() {
                    let t = params.get_mut(id);
                    let g = t.grad().expect("checked above").to_vec();
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((p, g), m), v) in t.data_mut().iter_mut().zip(&g).zip(m).zip(v) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
