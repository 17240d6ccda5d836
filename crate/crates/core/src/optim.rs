//! Parameter updates.
//!
//! Prompt training uses plain SGD by default so every step moves a parameter
//! by exactly `lr * grad`. Momentum and Adam are available for experiments
//! and for backbone pretraining.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "kind"))]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Momentum {
        beta: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct SlotState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

/// Per-parameter optimizer state, keyed by a caller-chosen slot id.
#[derive(Debug, Clone, Default)]
pub struct Optimizer {
    kind: OptimizerKind,
    slots: BTreeMap<u64, SlotState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            slots: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update to `param` in place.
    pub fn update(&mut self, slot: u64, param: &mut Tensor, grad: &Tensor, lr: f64) {
        debug_assert_eq!(param.shape(), grad.shape());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Momentum { beta } => {
                let st = self.state(slot, grad.len());
                for ((p, g), m) in param.data_mut().iter_mut().zip(grad.data()).zip(&mut st.m) {
                    *m = beta * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let st = self.state(slot, grad.len());
                st.t += 1;
                let bc1 = 1.0 - libm::pow(beta1, f64::from(st.t));
                let bc2 = 1.0 - libm::pow(beta2, f64::from(st.t));
                for (((p, g), m), v) in param
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(&mut st.m)
                    .zip(&mut st.v)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / bc1) / (libm::sqrt(*v / bc2) + eps);
                }
            }
        }
    }

    fn state(&mut self, slot: u64, len: usize) -> &mut SlotState {
        self.slots.entry(slot).or_insert_with(|| SlotState {
            m: alloc::vec![0.0; len],
            v: alloc::vec![0.0; len],
            t: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn sgd_moves_by_lr_times_grad() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        opt.update(0, &mut p, &Tensor::vector(vec![0.5, 4.0]), 0.1);
        assert_eq!(p.data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 4.0]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut opt = Optimizer::new(OptimizerKind::adam());
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        opt.update(3, &mut p, &Tensor::vector(vec![10.0, -0.01]), 0.01);
        assert!((p.data()[0] + 0.01).abs() < 1e-6);
        assert!((p.data()[1] - 0.01).abs() < 1e-5);
    }
}
