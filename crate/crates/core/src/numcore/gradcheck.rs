//! Central finite differences, used to check analytic gradients.

use super::tensor::Tensor;

/// `∂f/∂x` for every element of every input, by `(f(x+h) − f(x−h)) / 2h`.
pub fn central_differences(
    inputs: &[Tensor<f64>],
    h: f64,
    mut f: impl FnMut(&[Tensor<f64>]) -> f64,
) -> Vec<Tensor<f64>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[t].shape().to_vec());
        for i in 0..inputs[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let up = f(&work);
            work[t].data_mut()[i] = orig - h;
            let down = f(&work);
            work[t].data_mut()[i] = orig;
            grad.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

/// `max|a − b| / max(max|b|, floor)`: error relative to the reference scale.
pub fn relative_error(analytic: &Tensor<f64>, reference: &Tensor<f64>, floor: f64) -> f64 {
    let scale = reference.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(floor);
    analytic.max_abs_diff(reference) / scale
}
