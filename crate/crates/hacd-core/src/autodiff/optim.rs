//! SGD with momentum under a cosine-decay learning-rate schedule:
//! lr(t) = 0.5 * base_lr * (1 + cos(pi * t / T)), so lr(0) = base_lr and
//! lr(T) = 0. The step counter advances once per epoch, driven by the trainer.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug)]
pub struct OptimizerState {
    base_lr: f64,
    epoch_budget: usize,
    step: usize,
    momentum: f64,
    velocities: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(
        base_lr: f64,
        epoch_budget: usize,
        momentum: f64,
        params: &[Tensor],
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig {
                message: format!("momentum must be in [0, 1), got {}", momentum),
            });
        }
        if epoch_budget == 0 {
            return Err(Error::InvalidConfig {
                message: "epoch budget must be >= 1".into(),
            });
        }
        Ok(OptimizerState {
            base_lr,
            epoch_budget,
            step: 0,
            momentum,
            velocities: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn epoch_budget(&self) -> usize {
        self.epoch_budget
    }

    pub fn learning_rate(&self) -> f64 {
        let ratio = self.step as f64 / self.epoch_budget as f64;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * ratio).cos())
    }

    /// Advance the schedule by one epoch; stays within the budget.
    pub fn advance_epoch(&mut self) -> Result<()> {
        if self.step >= self.epoch_budget {
            return Err(Error::Misuse {
                message: format!(
                    "schedule exhausted: step {} of {}",
                    self.step, self.epoch_budget
                ),
            });
        }
        self.step += 1;
        Ok(())
    }

    /// One SGD update: v = momentum * v + grad; param -= lr(t) * v.
    /// Gradients are zeroed afterward; the step counter is untouched.
    pub fn sgd_step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.velocities.len() {
            return Err(Error::Misuse {
                message: format!(
                    "optimizer built for {} parameters, got {}",
                    self.velocities.len(),
                    params.len()
                ),
            });
        }
        if self.step > self.epoch_budget {
            return Err(Error::Misuse {
                message: format!("step {} exceeds budget {}", self.step, self.epoch_budget),
            });
        }
        let lr = self.learning_rate();
        for (i, param) in params.iter().enumerate() {
            let grad = param.take_grad().ok_or_else(|| Error::Misuse {
                message: format!("parameter {} has no gradient; run backward first", i),
            })?;
            if grad.len() != self.velocities[i].len() {
                return Err(Error::shape(
                    format!("{} gradient values", self.velocities[i].len()),
                    format!("{} gradient values", grad.len()),
                ));
            }
            let velocity = &mut self.velocities[i];
            let mut values = param.to_vec();
            for j in 0..grad.len() {
                velocity[j] = self.momentum * velocity[j] + grad[j];
                values[j] -= lr * velocity[j];
            }
            param.set_values(&values)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_uses_base_lr() {
        let p = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let mut opt = OptimizerState::new(0.05, 100, 0.0, std::slice::from_ref(&p)).unwrap();
        p.accumulate_grad(&[1.0, -2.0]);
        opt.sgd_step(std::slice::from_ref(&p)).unwrap();
        let v = p.to_vec();
        assert!((v[0] - (1.0 - 0.05)).abs() < 1e-12);
        assert!((v[1] - (2.0 + 0.1)).abs() < 1e-12);
        assert!(p.grad().is_none(), "gradients zeroed after the step");
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let p = Tensor::param(vec![1], vec![1.0]).unwrap();
        let mut opt = OptimizerState::new(0.05, 100, 0.9, std::slice::from_ref(&p)).unwrap();
        assert!((opt.learning_rate() - 0.05).abs() < 1e-15);
        for _ in 0..50 {
            opt.advance_epoch().unwrap();
        }
        assert!((opt.learning_rate() - 0.025).abs() < 1e-12);
        for _ in 0..50 {
            opt.advance_epoch().unwrap();
        }
        assert!(opt.learning_rate().abs() < 1e-17);
        // lr = 0: parameters unchanged by a step.
        p.accumulate_grad(&[123.0]);
        opt.sgd_step(std::slice::from_ref(&p)).unwrap();
        assert_eq!(p.to_vec(), vec![1.0]);
        assert!(opt.advance_epoch().is_err(), "budget exhausted");
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let p = Tensor::param(vec![1], vec![0.0]).unwrap();
        let mut opt = OptimizerState::new(1.0, 1000, 0.5, std::slice::from_ref(&p)).unwrap();
        p.accumulate_grad(&[1.0]);
        opt.sgd_step(std::slice::from_ref(&p)).unwrap();
        // lr(0) = 1.0 exactly, v = 1
        let after_one = p.to_vec()[0];
        assert!((after_one + 1.0).abs() < 1e-9);
        p.accumulate_grad(&[1.0]);
        opt.sgd_step(std::slice::from_ref(&p)).unwrap();
        // v = 0.5 * 1 + 1 = 1.5
        assert!((p.to_vec()[0] + 2.5).abs() < 1e-9);
    }

    #[test]
    fn missing_gradient_is_misuse() {
        let p = Tensor::param(vec![1], vec![0.0]).unwrap();
        let mut opt = OptimizerState::new(0.05, 10, 0.9, std::slice::from_ref(&p)).unwrap();
        assert!(matches!(
            opt.sgd_step(std::slice::from_ref(&p)),
            Err(Error::Misuse { .. })
        ));
    }
}
