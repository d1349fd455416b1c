//! Central-difference gradient oracle.

use crate::tensor::Tensor;

/// Central difference (f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps) per element,
/// computed entirely in 64-bit.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    assert!(eps > 0.0, "finite_diff_grad requires eps > 0");
    let mut work = x.to_vec();
    let mut grad = vec![0.0f64; x.len()];
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let hi = f(&work);
        work[i] = orig - eps;
        let lo = f(&work);
        work[i] = orig;
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Finite differences over a tensor-valued function. The perturbed values are
/// rounded through f32 storage, so use this for checking f32 forward passes;
/// the division and accumulation stay in 64-bit.
pub fn finite_diff_grad_tensor(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    eps: f64,
) -> Vec<f64> {
    assert!(eps > 0.0, "finite_diff_grad_tensor requires eps > 0");
    let mut work = x.clone();
    let mut grad = vec![0.0f64; x.numel()];
    for i in 0..x.numel() {
        let orig = work.data()[i];
        work.data_mut()[i] = (orig as f64 + eps) as f32;
        let hi = f(&work);
        work.data_mut()[i] = (orig as f64 - eps) as f32;
        let lo = f(&work);
        work.data_mut()[i] = orig;
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// max_i |a_i - b_i| / max(||a||_inf, ||b||_inf, floor). The floor keeps the
/// ratio meaningful when both gradients are tiny.
pub fn max_rel_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut max_abs = 0.0f64;
    let mut scale = 1e-6f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        max_abs = max_abs.max((a as f64 - n).abs());
        scale = scale.max((a as f64).abs()).max(n.abs());
    }
    max_abs / scale
}
