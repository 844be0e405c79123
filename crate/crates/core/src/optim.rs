use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(invalid!("learning rate must be positive, got {lr}"));
        }
        Ok(Optimizer { kind, lr, t: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(invalid!("learning rate must be positive, got {lr}"));
        }
        self.lr = lr;
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(invalid!("{} parameters but {} gradients", params.len(), grads.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            g.ensure_shape(p.shape(), "optimizer gradient")?;
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = T::of(self.lr);
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.is_empty() {
                    self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
                    self.v = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
                }
                if self.m.len() != params.len() {
                    return Err(invalid!("optimizer state covers {} tensors, got {}", self.m.len(), params.len()));
                }
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                let step = T::of(self.lr / bc1);
                let (b1, b2) = (T::of(beta1), T::of(beta2));
                let (c1, c2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
                let inv_bc2 = T::of(1.0 / bc2);
                let eps = T::of(eps);
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
                    for (((w, &gv), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + c1 * gv;
                        *vi = b2 * *vi + c2 * gv * gv;
                        *w -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
