//! 3D batch normalization over [N, C, D, H, W]: per-channel statistics over
//! (N, D, H, W), exponential-moving-average running stats for eval mode.

use std::cell::RefCell;
use std::collections::HashMap;

use super::{flow_buffer, make_result, Op, Tensor};
use crate::error::{Error, Result};

/// Running-stat update weight: running = (1 - MOMENTUM) * running + MOMENTUM * batch.
const MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean and variance, updated in train mode and consumed
/// in eval mode. Not differentiable.
#[derive(Debug, Clone)]
pub struct RunningStats {
    mean: RefCell<Vec<f64>>,
    var: RefCell<Vec<f64>>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: RefCell::new(vec![0.0; channels]),
            var: RefCell::new(vec![1.0; channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.borrow().len()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.mean.borrow().clone()
    }

    pub fn var(&self) -> Vec<f64> {
        self.var.borrow().clone()
    }

    pub fn set(&self, mean: Vec<f64>, var: Vec<f64>) {
        *self.mean.borrow_mut() = mean;
        *self.var.borrow_mut() = var;
    }
}

pub(crate) struct SavedNorm {
    pub(crate) input: Tensor,
    pub(crate) gamma: Tensor,
    pub(crate) beta: Tensor,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    per_channel: usize,
    train: bool,
}

/// Normalize per channel, scale by gamma, shift by beta.
///
/// Train mode uses batch statistics and updates `stats`; eval mode uses the
/// running statistics unchanged.
pub fn batchnorm3d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &RunningStats,
    mode: Mode,
    eps: f64,
) -> Result<Tensor> {
    let shape = input.shape().to_vec();
    if shape.len() != 5 {
        return Err(Error::shape(
            "[N, C, D, H, W] input".to_string(),
            format!("{:?}", shape),
        ));
    }
    let (n, c) = (shape[0], shape[1]);
    let spatial = shape[2] * shape[3] * shape[4];
    let per_channel = n * spatial;
    if gamma.shape() != [c] || beta.shape() != [c] || stats.channels() != c {
        return Err(Error::shape(
            format!("gamma/beta/running stats of length {}", c),
            format!(
                "gamma {:?}, beta {:?}, running {}",
                gamma.shape(),
                beta.shape(),
                stats.channels()
            ),
        ));
    }
    if mode == Mode::Train && per_channel < 2 {
        return Err(Error::DegenerateBatch {
            channel_elements: per_channel,
        });
    }

    let (mean, var) = match mode {
        Mode::Train => {
            let x = input.values();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut sum = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * spatial;
                    for s in 0..spatial {
                        sum += x[base + s];
                    }
                }
                let mu = sum / per_channel as f64;
                let mut sq = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * spatial;
                    for s in 0..spatial {
                        let d = x[base + s] - mu;
                        sq += d * d;
                    }
                }
                mean[ci] = mu;
                var[ci] = sq / per_channel as f64;
            }
            {
                let mut rm = stats.mean.borrow_mut();
                let mut rv = stats.var.borrow_mut();
                for ci in 0..c {
                    rm[ci] = (1.0 - MOMENTUM) * rm[ci] + MOMENTUM * mean[ci];
                    rv[ci] = (1.0 - MOMENTUM) * rv[ci] + MOMENTUM * var[ci];
                }
            }
            (mean, var)
        }
        Mode::Eval => (stats.mean(), stats.var()),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; input.numel()];
    {
        let x = input.values();
        let gv = gamma.values();
        let bv = beta.values();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * spatial;
                let (mu, istd, g, b) = (mean[ci], inv_std[ci], gv[ci], bv[ci]);
                for s in 0..spatial {
                    out[base + s] = (x[base + s] - mu) * istd * g + b;
                }
            }
        }
    }

    let parents_need = input.needs_grad() || gamma.needs_grad() || beta.needs_grad();
    Ok(make_result(
        shape,
        out,
        Op::BatchNorm(SavedNorm {
            input: input.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            mean,
            inv_std,
            per_channel,
            train: mode == Mode::Train,
        }),
        parents_need,
    ))
}

pub(crate) fn norm_backward(saved: &SavedNorm, g: &[f64], flowing: &mut HashMap<u64, Vec<f64>>) {
    let shape = saved.input.shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let spatial = shape[2] * shape[3] * shape[4];
    let m = saved.per_channel as f64;
    let x = saved.input.values();
    let gv = saved.gamma.values();

    // Per-channel sums of g and g * x_hat.
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            let (mu, istd) = (saved.mean[ci], saved.inv_std[ci]);
            for s in 0..spatial {
                let gi = g[base + s];
                sum_g[ci] += gi;
                sum_gx[ci] += gi * (x[base + s] - mu) * istd;
            }
        }
    }

    if saved.input.needs_grad() {
        let buf = flowing
            .entry(saved.input.id())
            .or_insert_with(|| vec![0.0; saved.input.numel()]);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * spatial;
                let (mu, istd, gamma) = (saved.mean[ci], saved.inv_std[ci], gv[ci]);
                if saved.train {
                    // Batch statistics are functions of the input.
                    for s in 0..spatial {
                        let x_hat = (x[base + s] - mu) * istd;
                        buf[base + s] +=
                            gamma * istd / m * (m * g[base + s] - sum_g[ci] - x_hat * sum_gx[ci]);
                    }
                } else {
                    // Running statistics are constants.
                    for s in 0..spatial {
                        buf[base + s] += g[base + s] * gamma * istd;
                    }
                }
            }
        }
    }
    if saved.gamma.needs_grad() {
        if let Some(buf) = flow_buffer(flowing, &saved.gamma) {
            for ci in 0..c {
                buf[ci] += sum_gx[ci];
            }
        }
    }
    if saved.beta.needs_grad() {
        if let Some(buf) = flow_buffer(flowing, &saved.beta) {
            for ci in 0..c {
                buf[ci] += sum_g[ci];
            }
        }
    }
}
