use super::ParamSet;
use crate::error::{Error, Result};

/// Relative error for one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    pub entry_max_abs_error: f64,
    pub entries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

/// Gradients with a smaller norm are compared in absolute terms.
pub const DENOM_FLOOR: f64 = 1e-8;

/// Compares analytic gradients against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε`, entry by entry.
///
/// The error for a parameter is `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)` over all its
/// entries, which keeps entries that happen to sit near zero from being
/// dominated by the roundoff in `f`. `entry_max_abs_error` records the largest
/// single-entry discrepancy.
pub fn grad_check<F>(
    mut f: F,
    params: &ParamSet,
    analytic: &ParamSet,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for (name, value) in params {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::Schema(format!("no analytic gradient for `{name}`")))?;
        if grad.shape() != value.shape() {
            return Err(Error::shape("grad_check", value.shape(), grad.shape()));
        }
        let (mut diff_sq, mut a_sq, mut n_sq, mut worst_abs) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for idx in 0..value.data().len() {
            let original = value.data()[idx];
            work.get_mut(name).unwrap().data_mut()[idx] = original + eps;
            let up = f(&work);
            work.get_mut(name).unwrap().data_mut()[idx] = original - eps;
            let down = f(&work);
            work.get_mut(name).unwrap().data_mut()[idx] = original;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Evaluation(format!(
                    "non-finite objective while perturbing `{name}`[{idx}]"
                )));
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[idx];
            diff_sq += (a - numeric).powi(2);
            a_sq += a * a;
            n_sq += numeric * numeric;
            worst_abs = worst_abs.max((a - numeric).abs());
        }
        let denom = a_sq.sqrt().max(n_sq.sqrt()).max(DENOM_FLOOR);
        report.push(ParamError {
            name: name.clone(),
            max_rel_error: diff_sq.sqrt() / denom,
            entry_max_abs_error: worst_abs,
            entries: value.data().len(),
        });
    }
    Ok(GradCheckReport { params: report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{Matrix, Rng};

    fn set_of(m: Matrix) -> ParamSet {
        let mut s = ParamSet::new();
        s.insert("theta".into(), m);
        s
    }

    fn half_norm_sq(s: &ParamSet) -> f64 {
        0.5 * s.values().map(Matrix::sum_squares).sum::<f64>()
    }

    #[test]
    fn quadratic_closed_form() {
        let theta = Rng::new(2).uniform_matrix(3, 4, 2.0);
        let params = set_of(theta.clone());
        let grads = set_of(theta);
        let report = grad_check(half_norm_sq, &params, &grads, 1e-5).unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_function_zero_gradient() {
        let params = set_of(Rng::new(3).uniform_matrix(2, 2, 1.0));
        let grads = set_of(Matrix::zeros(2, 2));
        let report = grad_check(|_| 4.2, &params, &grads, 1e-5).unwrap();
        assert_eq!(report.max_rel_error(), 0.0);
    }

    #[test]
    fn doubled_gradient_reports_half() {
        // Keep entries away from zero so the 1e-8 floor never applies.
        let theta = Matrix::from_rows(&[[0.5, -1.5], [2.0, 0.75]]).unwrap();
        let params = set_of(theta.clone());
        let grads = set_of(theta.scale(2.0));
        let err = grad_check(half_norm_sq, &params, &grads, 1e-5)
            .unwrap()
            .max_rel_error();
        assert!((err - 0.5).abs() < 1e-6, "{err}");
    }

    #[test]
    fn single_wrong_entry_is_caught() {
        let theta = Rng::new(4).uniform_matrix(4, 4, 1.0);
        let params = set_of(theta.clone());
        let mut bad = theta.clone();
        bad.set(2, 1, bad.get(2, 1) + 0.05);
        let report = grad_check(half_norm_sq, &params, &set_of(bad), 1e-5).unwrap();
        assert!(!report.passes(1e-4), "{report:?}");
        assert!((report.params[0].entry_max_abs_error - 0.05).abs() < 1e-8);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let params = set_of(Matrix::zeros(1, 1));
        let grads = set_of(Matrix::zeros(1, 1));
        let res = grad_check(|_| f64::NAN, &params, &grads, 1e-5);
        assert!(matches!(res, Err(Error::Evaluation(_))));
    }

    #[test]
    fn missing_gradient_is_named() {
        let params = set_of(Matrix::zeros(1, 1));
        let err = grad_check(|_| 0.0, &params, &ParamSet::new(), 1e-5).unwrap_err();
        assert!(err.to_string().contains("theta"));
    }
}
