//! Adam optimizer with an optional linear-warmup learning-rate schedule,
//! shared by GNN pretraining and instruction tuning.

use crate::autodiff::Tensor;
use crate::{Error, Result};

pub struct Adam {
    params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64) -> Result<Adam> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
        }
        let m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Ok(Adam { params, m, v, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0 })
    }

    /// One update from the currently accumulated gradients; clears them.
    /// `lr_scale` multiplies the base rate (warmup).
    pub fn step(&mut self, lr_scale: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let g = p.grad();
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric("non-finite gradient in optimizer step".into()));
            }
            let mut vals = p.values();
            for j in 0..g.len() {
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g[j];
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = self.m[i][j] / bc1;
                let vhat = self.v[i][j] / bc2;
                vals[j] -= self.lr * lr_scale * mhat / (vhat.sqrt() + self.eps);
            }
            p.set_values(&vals);
            p.zero_grad();
        }
        Ok(())
    }
}

/// Linear warmup from 0 to 1 over `warmup_steps`, then constant.
pub fn warmup_scale(step: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        1.0
    } else {
        (step + 1) as f64 / warmup_steps as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward;

    #[test]
    fn adam_minimizes_quadratic() {
        let x = Tensor::param(&[2], vec![3.0, -2.0]);
        let mut opt = Adam::new(vec![x.clone()], 0.1).unwrap();
        for _ in 0..300 {
            let loss = x.square().sum();
            backward(&loss).unwrap();
            opt.step(1.0).unwrap();
        }
        assert!(x.values().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn warmup_schedule_shape() {
        assert_eq!(warmup_scale(0, 4), 0.25);
        assert_eq!(warmup_scale(3, 4), 1.0);
        assert_eq!(warmup_scale(100, 4), 1.0);
        assert_eq!(warmup_scale(0, 0), 1.0);
    }

    #[test]
    fn bad_lr_rejected() {
        let x = Tensor::param(&[1], vec![0.0]);
        assert!(Adam::new(vec![x], 0.0).is_err());
    }
}
