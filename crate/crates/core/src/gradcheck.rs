//! Central-difference verification harness for any differentiable
//! operation in the crate.
//!
//! The probe evaluates `(f(x+h) - f(x-h)) / 2h` per coordinate with a step
//! scaled to the coordinate magnitude and compares against the analytic
//! gradient. Central differences are exact (to roundoff) on polynomials of
//! degree two, which the tests pin down.

use std::fmt;

/// Step and tolerance settings for a check.
#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    /// Base step; the per-coordinate step is `step * max(1, |x_i|)`.
    pub step: f64,
    /// Relative-error threshold for the pass flag.
    pub tolerance: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: 1e-6,
            tolerance: 1e-6,
        }
    }
}

/// Outcome of one gradient check over a parameter pack.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    /// Relative error uses a `max(|analytic|, |numeric|, 1e-12)` denominator.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinate index of the worst relative error.
    pub worst_index: usize,
    pub checked: usize,
    pub pass: bool,
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<24} {:>12.4e} {:>12.4e} {:>8} {:>6}  {}",
            self.name,
            self.max_rel_err,
            self.max_abs_err,
            self.worst_index,
            self.checked,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

/// Header line matching [`GradReport`]'s display columns.
pub fn report_header() -> String {
    format!(
        "{:<24} {:>12} {:>12} {:>8} {:>6}  {}",
        "quantity", "max rel err", "max abs err", "worst", "n", "verdict"
    )
}

/// Check the analytic gradient of a scalar-valued function against central
/// finite differences.
///
/// `point` is perturbed in place and restored, so the function must be pure
/// given its argument. Panics if the function value is non-finite at any
/// probe, since the comparison would be meaningless.
pub fn check_scalar_fn<F>(
    mut f: F,
    point: &mut [f64],
    analytic: &[f64],
    name: &str,
    opts: &CheckOptions,
) -> GradReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(
        point.len(),
        analytic.len(),
        "gradient length does not match parameter pack"
    );
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut worst = 0usize;
    for i in 0..point.len() {
        let x = point[i];
        let h = opts.step * x.abs().max(1.0);
        point[i] = x + h;
        let fp = f(point);
        point[i] = x - h;
        let fm = f(point);
        point[i] = x;
        assert!(
            fp.is_finite() && fm.is_finite(),
            "non-finite function value while probing coordinate {i}"
        );
        let numeric = (fp - fm) / (2.0 * h);
        let abs = (numeric - analytic[i]).abs();
        let rel = abs / numeric.abs().max(analytic[i].abs()).max(1e-12);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
        max_abs = max_abs.max(abs);
    }
    GradReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        worst_index: worst,
        checked: point.len(),
        pass: max_rel < opts.tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut x = vec![3.0];
        let report = check_scalar_fn(
            |v| v[0] * v[0],
            &mut x,
            &[6.0],
            "square",
            &CheckOptions {
                step: 1e-5,
                tolerance: 1e-9,
            },
        );
        assert!(report.pass, "{report}");
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut x = vec![1.0, -2.0, 0.5];
        let report = check_scalar_fn(
            |_| 42.0,
            &mut x,
            &[0.0, 0.0, 0.0],
            "constant",
            &CheckOptions::default(),
        );
        assert!(report.pass, "{report}");
        assert_eq!(report.max_abs_err, 0.0);
    }

    #[test]
    fn degree_two_polynomials_reproduce_exact_derivatives() {
        // f(x, y) = 2x^2 - 3xy + y^2 + 4x - 1 at a few points.
        let f = |v: &[f64]| 2.0 * v[0] * v[0] - 3.0 * v[0] * v[1] + v[1] * v[1] + 4.0 * v[0] - 1.0;
        for (x, y) in [(0.0, 0.0), (1.5, -2.0), (-3.0, 0.25)] {
            let mut p = vec![x, y];
            let grad = [4.0 * x - 3.0 * y + 4.0, -3.0 * x + 2.0 * y];
            let report = check_scalar_fn(
                f,
                &mut p,
                &grad,
                "poly2",
                &CheckOptions {
                    step: 1e-6,
                    tolerance: 1e-8,
                },
            );
            assert!(report.pass, "{report}");
        }
    }

    #[test]
    fn point_is_restored_after_checking() {
        let mut x = vec![1.25, -0.5];
        let orig = x.clone();
        let _ = check_scalar_fn(
            |v| v[0].sin() + v[1].cos(),
            &mut x,
            &[1.25f64.cos(), 0.5f64.sin()],
            "trig",
            &CheckOptions::default(),
        );
        assert_eq!(x, orig);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn non_finite_values_are_rejected() {
        let mut x = vec![0.0];
        let _ = check_scalar_fn(
            |_| f64::NAN,
            &mut x,
            &[0.0],
            "nan",
            &CheckOptions::default(),
        );
    }
}
