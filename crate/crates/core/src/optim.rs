//! First-order optimizers over flat parameter slices.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Momentum { momentum: f64 },
}

impl OptimizerKind {
    pub const ADAM: Self = Self::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    pub const MOMENTUM: Self = Self::Momentum { momentum: 0.9 };
}

/// Optimizer state for one parameter group.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        let second = match kind {
            OptimizerKind::Adam { .. } => vec![0.0; len],
            OptimizerKind::Momentum { .. } => Vec::new(),
        };
        Self {
            kind,
            first: vec![0.0; len],
            second,
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update `params -= lr * direction(grads)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.first.len(), "parameter length changed");
        assert_eq!(grads.len(), params.len(), "gradient length mismatch");
        self.step += 1;
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.step as i32);
                let c2 = 1.0 - beta2.powi(self.step as i32);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    let m = self.first[i] / c1;
                    let v = self.second[i] / c2;
                    params[i] -= lr * m / (v.sqrt() + eps);
                }
            }
            OptimizerKind::Momentum { momentum } => {
                for i in 0..params.len() {
                    self.first[i] = momentum * self.first[i] + grads[i];
                    params[i] -= lr * self.first[i];
                }
            }
        }
    }

    /// Keeps the state rows selected by `keep` (in order) and appends
    /// `added` zeroed rows; `width` values per row.
    pub fn remap(&mut self, keep: &[usize], added: usize, width: usize) {
        let pick = |v: &Vec<f64>| -> Vec<f64> {
            if v.is_empty() {
                return Vec::new();
            }
            let mut out: Vec<f64> = keep.iter().flat_map(|&r| v[r * width..(r + 1) * width].iter().copied()).collect();
            out.resize(out.len() + added * width, 0.0);
            out
        };
        self.first = pick(&self.first);
        self.second = pick(&self.second);
    }
}
