//! Central finite differences. Only forward evaluations are used, so these
//! estimates are independent of the reverse pass they are compared against.

use super::tensor::Tensor;

/// Central-difference gradient of `loss` with respect to every entry of every tensor in `params`.
pub fn finite_difference<F>(params: &[Tensor], h: f64, mut loss: F) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut grad = vec![0.0; params[pi].len()];
        for (i, g) in grad.iter_mut().enumerate() {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let plus = loss(&work);
            work[pi].data_mut()[i] = orig - h;
            let minus = loss(&work);
            work[pi].data_mut()[i] = orig;
            *g = (plus - minus) / (2.0 * h);
        }
        out.push(Tensor::new(params[pi].shape().to_vec(), grad).expect("same shape"));
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both are zero.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.data().iter().zip(numeric.data()).map(|(a, b)| a - b).collect();
    let scale = norm(analytic.data()).max(norm(numeric.data()));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
