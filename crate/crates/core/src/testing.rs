//! Finite-difference helpers shared by the unit tests.

use crate::tensor::Tensor;

/// Central differences of `f` with respect to every coordinate of `inputs[which]`.
///
/// The step actually taken is recovered from the `f32` representation so
/// rounding of `x ± eps` does not bias the quotient.
pub fn finite_difference(
    inputs: &[Tensor],
    which: usize,
    eps: f32,
    f: impl Fn(&[Tensor]) -> f64,
) -> Tensor {
    let mut work = inputs.to_vec();
    let n = inputs[which].numel();
    let mut out = vec![0.0f32; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let x = inputs[which].data()[i];
        let (hi, lo) = (x + eps, x - eps);
        work[which].data_mut()[i] = hi;
        let f_hi = f(&work);
        work[which].data_mut()[i] = lo;
        let f_lo = f(&work);
        work[which].data_mut()[i] = x;
        *slot = ((f_hi - f_lo) / (hi as f64 - lo as f64)) as f32;
    }
    Tensor::new(inputs[which].shape().to_vec(), out).unwrap()
}

/// Largest per-coordinate `|a - b| / max(|a|, |b|, 1)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| {
            let (a, b) = (a as f64, b as f64);
            (a - b).abs() / a.abs().max(b.abs()).max(1.0)
        })
        .fold(0.0, f64::max)
}

pub fn assert_grad_matches(analytic: &Tensor, numeric: &Tensor, tol: f64) {
    assert_eq!(analytic.shape(), numeric.shape());
    let err = max_relative_error(analytic, numeric);
    assert!(
        err < tol,
        "gradient mismatch: relative error {err:e}\nanalytic {:?}\nnumeric  {:?}",
        analytic,
        numeric
    );
}
