//! SGD with momentum, Adam, and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * epoch / total)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_epochs == 0 {
        return lr_max;
    }
    let frac = (epoch.min(total_epochs) as f64) / total_epochs as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

fn check_shapes<T: Scalar>(state: &[Vec<T>], params: &[Tensor<T>]) -> Result<()> {
    if state.len() != params.len() || state.iter().zip(params).any(|(s, p)| s.len() != p.numel()) {
        return Err(Error::shape(
            "optimizer",
            "parameter list does not match optimizer state",
        ));
    }
    Ok(())
}

/// Heavy-ball SGD with coupled L2 weight decay:
/// `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    pub velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &[Tensor<T>], momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum: cast(momentum),
            weight_decay: cast(weight_decay),
            velocity: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &[Tensor<T>], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::invalid("sgd", format!("learning rate {lr} must be positive")));
        }
        check_shapes(&self.velocity, params)?;
        let lr: T = cast(lr);
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            let grad = p.grad();
            let mut data = p.data_mut();
            for (i, (x, vi)) in data.iter_mut().zip(v.iter_mut()).enumerate() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]) + self.weight_decay * *x;
                *vi = self.momentum * *vi + g;
                *x -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction; weight decay is added to the gradient before
/// the moment updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Tensor<T>], lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::invalid("adam", format!("learning rate {lr} must be positive")));
        }
        Ok(Adam {
            lr: cast(lr),
            beta1: cast(0.9),
            beta2: cast(0.999),
            eps: cast(1e-8),
            weight_decay: cast(weight_decay),
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            steps: 0,
        })
    }

    pub fn step(&mut self, params: &[Tensor<T>]) -> Result<()> {
        check_shapes(&self.m, params)?;
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        for ((p, m), v) in params.iter().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let grad = p.grad();
            let mut data = p.data_mut();
            for (i, x) in data.iter_mut().enumerate() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]) + self.weight_decay * *x;
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
