use serde::{Deserialize, Serialize};

use super::params::{Grads, Param, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}


/// First-order optimizer with per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        let zeros = |store: &ParamStore| store.iter().map(|p| vec![0.0; p.data.len()]).collect();
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Momentum { .. } => (zeros(store), Vec::new()),
            OptimizerKind::Adam { .. } => (zeros(store), zeros(store)),
        };
        Self {
            kind,
            lr,
            step: 0,
            first,
            second,
        }
    }

    /// Apply one update to every parameter accepted by `trainable`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, trainable: impl Fn(&Param) -> bool) {
        self.step += 1;
        let lr = self.lr;
        for (i, p) in store.iter_mut().enumerate() {
            if !trainable(p) {
                continue;
            }
            let g = &grads.buffers()[i];
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.data.iter_mut().zip(g) {
                        *w -= lr * gi;
                    }
                }
                OptimizerKind::Momentum { beta } => {
                    let m = &mut self.first[i];
                    for ((w, gi), mi) in p.data.iter_mut().zip(g).zip(m.iter_mut()) {
                        *mi = beta * *mi + gi;
                        *w -= lr * *mi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(self.step as i32);
                    let bc2 = 1.0 - beta2.powi(self.step as i32);
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    for (((w, gi), mi), vi) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}
