//! Central finite-difference gradient checker.

use super::Tensor;
use crate::error::{Error, Result};

/// Outcome of one finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Coordinates left out because every probe crossed a kink.
    pub skipped: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            coords_checked: 0,
            skipped: 0,
        }
    }

    /// Combine two reports, keeping the worst coordinate.
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let coords = self.coords_checked + other.coords_checked;
        let skipped = self.skipped + other.skipped;
        let mut worst = if other.max_rel_error > self.max_rel_error {
            other
        } else {
            self
        };
        worst.coords_checked = coords;
        worst.skipped = skipped;
        worst
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`. The floor keeps rounding noise on
/// vanishing gradients from reading as a large relative error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare `analytic` against central differences of `f` at `params`.
///
/// Every coordinate is perturbed by `±eps`; `eps` must lie in `[1e-7, 1e-3]`.
pub fn grad_check<F>(f: F, params: &Tensor<f64>, analytic: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let coords: Vec<usize> = (0..params.len()).collect();
    grad_check_coords(f, params, analytic, eps, &coords)
}

/// As [`grad_check`], restricted to the listed flat coordinates.
pub fn grad_check_coords<F>(
    mut f: F,
    params: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eps: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    grad_check_piecewise(|p| Ok((f(p)?, 0)), params, analytic, eps, coords)
}

/// Finite differences for piecewise-smooth objectives.
///
/// `f` returns the objective and a signature of its active piece (for example
/// a hash of ReLU on/off bits). When a probe lands on a different piece than
/// the unperturbed point the step is shrunk tenfold, up to three times; a
/// coordinate that still straddles a kink is counted in `skipped`.
pub fn grad_check_piecewise<F>(
    mut f: F,
    params: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eps: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor<f64>) -> Result<(f64, u64)>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::config(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    if params.shape() != analytic.shape() {
        return Err(Error::config(format!(
            "grad_check: params {:?} vs analytic {:?}",
            params.shape(),
            analytic.shape()
        )));
    }
    let (_, base_sig) = f(params)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport::empty();
    for &i in coords {
        let orig = probe.data()[i];
        let mut step = eps;
        let mut numeric = None;
        for _ in 0..4 {
            probe.data_mut()[i] = orig + step;
            let (up, up_sig) = f(&probe)?;
            probe.data_mut()[i] = orig - step;
            let (down, down_sig) = f(&probe)?;
            probe.data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::numeric(format!(
                    "grad_check: objective not finite at coordinate {i}"
                )));
            }
            if up_sig == base_sig && down_sig == base_sig {
                numeric = Some((up - down) / (2.0 * step));
                break;
            }
            step /= 10.0;
        }
        let Some(numeric) = numeric else {
            report.skipped += 1;
            continue;
        };
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        report.coords_checked += 1;
        if err > report.max_rel_error || report.coords_checked == 1 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Prng;

    fn sum_sq(x: &Tensor<f64>) -> Result<f64> {
        Ok(x.data().iter().map(|v| v * v).sum())
    }

    #[test]
    fn exact_quadratic() {
        let mut rng = Prng::new(0);
        let x = Tensor::from_fn(&[5, 3], |_| rng.normal());
        let grad = x.map(|v| 2.0 * v);
        let report = grad_check(sum_sq, &x, &grad, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.coords_checked, 15);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut rng = Prng::new(1);
        let x = Tensor::from_fn(&[8], |_| rng.normal());
        let grad = x.map(|v| 2.0 * v * 1.01);
        let report = grad_check(sum_sq, &x, &grad, 1e-5).unwrap();
        assert!(report.max_rel_error > 1e-3);
    }

    #[test]
    fn kinks_shrink_the_step() {
        // |x| at x = 1e-6: a 1e-5 step crosses zero, 1e-7 does not.
        let x = Tensor::from_vec(&[1], vec![1e-6]).unwrap();
        let grad = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let abs = |p: &Tensor<f64>| Ok((p.data()[0].abs(), (p.data()[0] > 0.0) as u64));
        let report = grad_check_piecewise(abs, &x, &grad, 1e-5, &[0]).unwrap();
        assert_eq!(report.skipped, 0);
        assert!(report.max_rel_error < 1e-9);
        let report = grad_check_piecewise(abs, &Tensor::zeros(&[1]), &grad, 1e-5, &[0]).unwrap();
        assert_eq!((report.skipped, report.coords_checked), (1, 0));
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let x = Tensor::zeros(&[2]);
        assert!(grad_check(sum_sq, &x, &x, 1e-2).is_err());
        assert!(grad_check(sum_sq, &x, &x, 1e-9).is_err());
    }

    #[test]
    fn non_finite_objective_is_numeric_error() {
        let x = Tensor::zeros(&[2]);
        let r = grad_check(|_| Ok(f64::NAN), &x, &x, 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
