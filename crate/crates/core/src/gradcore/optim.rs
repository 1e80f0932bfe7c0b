use crate::error::{Error, Result};

use super::tensor::DenseTensor;

/// Learning rate divided by `factor` at each milestone epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDecay {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl StepDecay {
    pub fn new(base_lr: f64, milestones: Vec<usize>) -> Self {
        Self {
            base_lr,
            milestones,
            factor: 10.0,
        }
    }

    /// Rate for the zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr / self.factor.powi(drops as i32)
    }
}

/// Heavy-ball SGD: `v ← μv + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<DenseTensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut DenseTensor], grads: &[DenseTensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| DenseTensor::zeros(g.shape().to_vec())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.shape() != g.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("sgd step"));
        }
        Ok(())
    }
}
