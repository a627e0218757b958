//! Central-difference gradient checking.

use rand::Rng;

use super::{no_grad, Tensor};
use crate::error::Result;

/// Trainable tensor with entries uniform in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = super::numel(shape);
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::parameter(shape, data).expect("shape and data agree")
}

/// Relative error `|ga - gn| / max(|ga|, |gn|, 1e-8)` between two gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

/// Numerical gradient of the scalar `loss` with respect to `x`.
pub fn numeric_gradient(
    x: &Tensor,
    h: f64,
    loss: &mut impl FnMut() -> Result<Tensor>,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.numel()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let plus = no_grad(&mut *loss)?.item();
        x.data_mut()[i] = orig - h;
        let minus = no_grad(&mut *loss)?.item();
        x.data_mut()[i] = orig;
        *o = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Compares backprop against central differences for every tensor in
/// `params` and returns the worst per-tensor relative error. Gradients of
/// `params` are cleared before and after.
pub fn check_gradients(
    params: &[&Tensor],
    h: f64,
    mut loss: impl FnMut() -> Result<Tensor>,
) -> Result<f64> {
    params.iter().for_each(|p| p.zero_grad());
    loss()?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    params.iter().for_each(|p| p.zero_grad());
    let mut worst = 0.0f64;
    for (p, ga) in params.iter().zip(&analytic) {
        let gn = numeric_gradient(p, h, &mut loss)?;
        worst = worst.max(relative_error(ga, &gn));
    }
    Ok(worst)
}
