//! Batch normalization over every axis except the trailing channel axis.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Non-learnable half of a batch-norm layer. The learnable scale and shift
/// are passed to [`batchnorm`] as graph variables.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Element> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Element> BatchNormState<T> {
    /// Mean 0, variance 1.
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Self {
        Self {
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::ones([channels]),
            momentum,
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.numel()
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn updated(&self, stats: &BatchStats) -> Self {
        let m = self.momentum;
        let blend = |run: &Tensor<T>, batch: &[f64]| {
            Tensor::from_parts(
                run.shape().to_vec(),
                run.data()
                    .iter()
                    .zip(batch)
                    .map(|(&r, &b)| T::from_f64(m * r.as_f64() + (1.0 - m) * b))
                    .collect(),
            )
        };
        Self {
            running_mean: blend(&self.running_mean, &stats.mean),
            running_var: blend(&self.running_var, &stats.var),
            ..self.clone()
        }
    }
}

/// Per-channel statistics of one training batch (variance is biased).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Normalizes `x` per channel and applies `gamma * xhat + beta`.
///
/// In training mode the batch statistics are used and returned so the caller
/// can fold them into the running state; in inference mode the running
/// statistics are used and `None` is returned.
pub fn batchnorm<'g, T: Element>(
    x: &Var<'g, T>,
    gamma: &Var<'g, T>,
    beta: &Var<'g, T>,
    state: &BatchNormState<T>,
    training: bool,
) -> Result<(Var<'g, T>, Option<BatchStats>)> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("batchnorm on a scalar"))?;
    for (name, v) in [("gamma", gamma.shape()), ("beta", beta.shape())] {
        if v != [c] {
            return Err(Error::ShapeMismatch {
                op: if name == "gamma" {
                    "batchnorm gamma"
                } else {
                    "batchnorm beta"
                },
                left: vec![c],
                right: v.to_vec(),
            });
        }
    }
    if state.channels() != c {
        return Err(Error::ShapeMismatch {
            op: "batchnorm running stats",
            left: vec![c],
            right: vec![state.channels()],
        });
    }
    let data = x.value().data();
    let n = data.len() / c;
    if training && n < 2 {
        return Err(Error::invalid(
            "batchnorm in training mode needs at least 2 values per channel",
        ));
    }

    let (mean, var, stats) = if training {
        let mut mean = vec![0.0f64; c];
        for pos in data.chunks(c) {
            for (m, v) in mean.iter_mut().zip(pos) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0f64; c];
        for pos in data.chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(pos).zip(&mean) {
                let d = v.as_f64() - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        (mean, var, Some(stats))
    } else {
        let mean = state.running_mean.data().iter().map(|v| v.as_f64()).collect();
        let var = state.running_var.data().iter().map(|v| v.as_f64()).collect();
        (mean, var, None)
    };

    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v + state.epsilon).sqrt())
        .collect();
    let g_val = gamma.value().data();
    let b_val = beta.value().data();
    let mut xhat = Vec::with_capacity(data.len());
    let mut out = Vec::with_capacity(data.len());
    for pos in data.chunks(c) {
        for ch in 0..c {
            let xh = (pos[ch].as_f64() - mean[ch]) * inv_std[ch];
            xhat.push(T::from_f64(xh));
            out.push(T::from_f64(g_val[ch].as_f64() * xh + b_val[ch].as_f64()));
        }
    }

    let shape = x.shape().to_vec();
    let xhat = Tensor::from_parts(shape.clone(), xhat);
    let gamma_val = gamma.value().clone();
    let need = [x.requires_grad(), gamma.requires_grad(), beta.requires_grad()];
    let y = x.graph().record(
        "batchnorm",
        Tensor::from_parts(shape.clone(), out),
        &[x, gamma, beta],
        move |g| {
            let gd = g.data();
            let xh = xhat.data();
            let mut sum_dy = vec![0.0f64; c];
            let mut sum_dy_xhat = vec![0.0f64; c];
            for (gpos, xpos) in gd.chunks(c).zip(xh.chunks(c)) {
                for ch in 0..c {
                    let dy = gpos[ch].as_f64();
                    sum_dy[ch] += dy;
                    sum_dy_xhat[ch] += dy * xpos[ch].as_f64();
                }
            }
            let dx = need[0].then(|| {
                let gam: Vec<f64> = gamma_val.data().iter().map(|v| v.as_f64()).collect();
                let nf = n as f64;
                let mut dx = Vec::with_capacity(gd.len());
                for (gpos, xpos) in gd.chunks(c).zip(xh.chunks(c)) {
                    for ch in 0..c {
                        let dy = gpos[ch].as_f64();
                        let v = if training {
                            gam[ch] * inv_std[ch] / nf
                                * (nf * dy - sum_dy[ch] - xpos[ch].as_f64() * sum_dy_xhat[ch])
                        } else {
                            gam[ch] * inv_std[ch] * dy
                        };
                        dx.push(T::from_f64(v));
                    }
                }
                Tensor::from_parts(shape, dx)
            });
            let to_tensor = |v: &[f64]| Tensor::from_parts(vec![c], v.iter().map(|&x| T::from_f64(x)).collect());
            vec![
                dx,
                need[1].then(|| to_tensor(&sum_dy_xhat)),
                need[2].then(|| to_tensor(&sum_dy)),
            ]
        },
    )?;
    Ok((y, stats))
}
