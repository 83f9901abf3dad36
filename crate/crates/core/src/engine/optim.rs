//! Adam and the reduce-on-plateau learning-rate rule.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Element;

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Moments are kept in f64 whatever the
/// parameter precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: IndexMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update over named `(parameter, gradient)` pairs. Every gradient is
    /// checked before anything changes, so a non-finite gradient leaves both
    /// the parameters and the optimizer untouched.
    pub fn step<T: Element>(&mut self, params: &mut [(&str, &mut [T], &[T])]) -> Result<()> {
        for (name, theta, grad) in params.iter() {
            if theta.len() != grad.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    left: vec![theta.len()],
                    right: vec![grad.len()],
                });
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, theta, grad) in params.iter_mut() {
            let mo = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    m: vec![0.0; theta.len()],
                    v: vec![0.0; theta.len()],
                });
            if mo.m.len() != theta.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam moments",
                    left: vec![mo.m.len()],
                    right: vec![theta.len()],
                });
            }
            for i in 0..theta.len() {
                let g = grad[i].as_f64();
                mo.m[i] = self.beta1 * mo.m[i] + (1.0 - self.beta1) * g;
                mo.v[i] = self.beta2 * mo.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = mo.m[i] / c1;
                let v_hat = mo.v[i] / c2;
                theta[i] = T::from_f64(theta[i].as_f64() - self.lr * m_hat / (v_hat.sqrt() + self.epsilon));
            }
        }
        Ok(())
    }
}

/// Halves (by `factor`) the learning rate once the best validation dice has
/// not strictly improved for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: Option<f64>,
    wait: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: None,
            wait: 0,
        }
    }

    /// Feeds one epoch's validation dice and returns the learning rate for
    /// the next epoch.
    pub fn observe(&mut self, dice: f64) -> f64 {
        match self.best {
            Some(b) if dice <= b => {
                self.wait += 1;
                if self.wait >= self.patience {
                    self.lr *= self.factor;
                    self.wait = 0;
                }
            }
            _ => {
                self.best = Some(dice);
                self.wait = 0;
            }
        }
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}
