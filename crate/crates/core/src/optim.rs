//! Adam over named dense parameters.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the step counter; call once per optimization step before
    /// the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates one parameter in place.
    pub fn update(&mut self, name: &str, param: &mut Array2<f64>, grad: &Array2<f64>) -> Result<()> {
        if self.step == 0 {
            return Err(Error::InvalidArgument("begin_step must precede update".into()));
        }
        if param.dim() != grad.dim() {
            return Err(Error::InvalidArgument(format!(
                "{name}: parameter {:?} vs gradient {:?}",
                param.dim(),
                grad.dim()
            )));
        }
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Array2::zeros(grad.dim()), Array2::zeros(grad.dim())));
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.lr, self.eps);
        Zip::from(param).and(grad).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        });
        Ok(())
    }
}
