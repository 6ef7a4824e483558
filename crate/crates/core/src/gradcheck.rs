//! Central finite differences for checking analytic gradients.

use crate::numcore::Matrix;

/// Default perturbation for central differences.
pub const FD_STEP: f64 = 1e-5;

/// `(f(x + h e_k) - f(x - h e_k)) / 2h` for every entry `k` of `x`.
pub fn central_difference<E>(
    x: &Matrix,
    step: f64,
    mut f: impl FnMut(&Matrix) -> Result<f64, E>,
) -> Result<Matrix, E> {
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for k in 0..x.as_slice().len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + step;
        let plus = f(&probe)?;
        probe.as_mut_slice()[k] = orig - step;
        let minus = f(&probe)?;
        probe.as_mut_slice()[k] = orig;
        out.as_mut_slice()[k] = (plus - minus) / (2.0 * step);
    }
    Ok(out)
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
