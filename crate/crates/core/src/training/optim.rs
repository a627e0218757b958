use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Parameter;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub(crate) m: Vec<Vec<f64>>,
    pub(crate) v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[&Parameter], weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// One update of every parameter. A parameter without a gradient is
    /// treated as having a zero gradient, so weight decay still applies.
    pub fn step(&mut self, params: &[&Parameter], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Incompatible(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter().zip(&mut self.m).zip(&mut self.v) {
            if m.len() != p.tensor.numel() {
                return Err(Error::Shape(format!("optimizer state for `{}` has the wrong size", p.name)));
            }
            let grad = p.tensor.grad();
            let mut data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                data[i] *= 1.0 - lr * self.weight_decay;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `base_lr` over `ceil(warmup_frac * total_steps)`
/// steps (1-based), constant afterwards.
pub fn warmup_lr(step: u64, total_steps: u64, base_lr: f64, warmup_frac: f64) -> f64 {
    let warmup = (warmup_frac * total_steps as f64).ceil() as u64;
    if warmup == 0 || step >= warmup {
        base_lr
    } else {
        base_lr * step as f64 / warmup as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn warmup_endpoints() {
        assert_eq!(warmup_lr(10, 100, 1e-3, 0.1), 1e-3);
        assert_eq!(warmup_lr(1, 1000, 0.5, 0.1), 0.5 / 100.0);
        assert_eq!(warmup_lr(500, 1000, 0.5, 0.1), 0.5);
        assert_eq!(warmup_lr(1, 10, 0.5, 0.0), 0.5);
    }

    #[test]
    fn warmup_matches_closed_form() {
        let mut r = crate::rng::stream(0, &[]);
        for _ in 0..10 {
            let total = r.gen_range(1..5000u64);
            let step = r.gen_range(1..=total);
            let w = (0.1 * total as f64).ceil();
            let expect = 2e-5 * (step as f64 / w).min(1.0);
            assert!((warmup_lr(step, total, 2e-5, 0.1) - expect).abs() <= 1e-20);
        }
    }

    #[test]
    fn zero_gradient_still_decays() {
        let p = Parameter::new("probe", &[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut opt = AdamW::new(&[&p], 0.001);
        opt.step(&[&p], 0.1).unwrap();
        let expect: Vec<f64> = [1.0, -2.0, 0.5].iter().map(|x| x * (1.0 - 0.1 * 0.001)).collect();
        assert_eq!(p.tensor.to_vec(), expect);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let p = Parameter::new("w", &[2], vec![0.0, 0.0]).unwrap();
        p.tensor.mul(&crate::tensor::Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap())
            .unwrap()
            .sum()
            .backward()
            .unwrap();
        let mut opt = AdamW::new(&[&p], 0.0);
        opt.step(&[&p], 0.01).unwrap();
        let v = p.tensor.to_vec();
        assert!((v[0] + 0.01).abs() < 1e-9 && (v[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let p = Parameter::new("x", &[1], vec![5.0]).unwrap();
        let mut opt = AdamW::new(&[&p], 0.0);
        for _ in 0..2000 {
            p.tensor.zero_grad();
            p.tensor.add_scalar(-2.0).mse(&crate::tensor::Tensor::zeros(&[1])).unwrap().backward().unwrap();
            opt.step(&[&p], 0.05).unwrap();
        }
        assert!((p.tensor.item() - 2.0).abs() < 1e-3);
    }
}
