//! Central finite differences for verifying tape gradients.

use super::NumError;

/// `(f(θ + h·e_k) − f(θ − h·e_k)) / 2h` for every coordinate `k`.
pub fn central_difference<F>(theta: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|k| {
            probe[k] = theta[k] + h;
            let plus = f(&probe);
            probe[k] = theta[k] - h;
            let minus = f(&probe);
            probe[k] = theta[k];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|g_analytic − g_fd| / max(1, |g_fd|)` over all coordinates.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub parameters: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares the gradient returned by `value_and_grad` at `theta` against
/// central differences of its value.
///
/// `value_and_grad` must be deterministic; only its value is used for the
/// perturbed evaluations.
pub fn finite_diff_check<F>(theta: &[f64], h: f64, mut value_and_grad: F) -> Result<GradCheckReport, NumError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), NumError>,
{
    if !(h > 0.0) {
        return Err(NumError::Parameter(format!("step must be positive, got {h}")));
    }
    let (_, analytic) = value_and_grad(theta)?;
    if analytic.len() != theta.len() {
        return Err(NumError::Dimension(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }
    let mut failure = None;
    let numeric = central_difference(theta, h, |p| match value_and_grad(p) {
        Ok((v, _)) => v,
        Err(e) => {
            failure.get_or_insert(e);
            f64::NAN
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0, parameters: theta.len() };
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / n.abs().max(1.0);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst_index = k;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let r = finite_diff_check(&[3.0], 1e-5, |t| Ok((t[0] * t[0], vec![2.0 * t[0]]))).unwrap();
        assert!(r.max_rel_error <= 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let r = finite_diff_check(&[1.0, -2.0], 1e-5, |_| Ok((4.0, vec![0.0, 0.0]))).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let r = finite_diff_check(&[1.0, 2.0], 1e-5, |t| Ok((t[0] * t[1], vec![t[1], 0.0]))).unwrap();
        assert_eq!(r.worst_index, 1);
        assert!(r.max_rel_error > 0.5);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(finite_diff_check(&[1.0], 0.0, |t| Ok((t[0], vec![1.0]))).is_err());
    }
}
