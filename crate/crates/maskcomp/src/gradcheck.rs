//! Central finite-difference verification of analytic gradients.
//!
//! This module is deliberately independent of the tape's backward pass: it
//! only re-evaluates a scalar loss closure at perturbed inputs, so the two
//! gradient routes share no code. Test suites use it as the oracle against
//! which every differentiable op is checked.

use crate::tensor::Tensor;

/// Default step for central differences in f64; small enough for ~1e-10
/// truncation error, large enough to stay above rounding noise.
pub const FD_STEP: f64 = 1e-5;

/// Central finite-difference gradient of `loss` with respect to `inputs[which]`.
///
/// `loss` must be a pure function of the inputs.
pub fn fd_grad(
    inputs: &[Tensor<f64>],
    which: usize,
    step: f64,
    loss: &mut dyn FnMut(&[Tensor<f64>]) -> f64,
) -> Tensor<f64> {
    let n = inputs[which].len();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let mut plus = inputs.to_vec();
        let mut minus = inputs.to_vec();
        let (shape, mut data) = plus[which].clone().into_parts();
        data[i] += step;
        plus[which] = Tensor::new(shape.clone(), data).unwrap();
        let (_, mut data) = minus[which].clone().into_parts();
        data[i] -= step;
        minus[which] = Tensor::new(shape, data).unwrap();
        grad[i] = (loss(&plus) - loss(&minus)) / (2.0 * step);
    }
    Tensor::new(inputs[which].shape().to_vec(), grad).unwrap()
}

/// Relative error between an analytic gradient and its finite-difference
/// estimate: `max |a - f| / max(1, |a|, |f|)` over all elements.
///
/// The denominator floor avoids blowing up on near-zero entries where the
/// difference quotient is dominated by rounding.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &f)| (a - f).abs() / a.abs().max(f.abs()).max(1.0))
        .fold(0.0, f64::max)
}
