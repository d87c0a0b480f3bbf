//! Shared numerical kernels: the fixed-step gradient-descent minimizer used as
//! the lower-level oracle, a central-difference gradient oracle, and stable
//! elementary functions.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("non-finite {what} encountered at iteration {iteration} (diverged)")]
    NonFinite { what: &'static str, iteration: usize },
    #[error("non-finite objective value while perturbing coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },
    #[error("invalid gradient-descent settings: {0}")]
    InvalidSettings(String),
}

/// Fixed-step gradient descent with a gradient-norm stopping rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GDSettings {
    pub step: f64,
    /// Stop once the Euclidean gradient norm drops to this value.
    pub tol: f64,
    pub max_iters: usize,
}

impl GDSettings {
    /// Defaults chosen so oracle solves are near-exact: measured gaps should
    /// reflect the theory, not solver error.
    pub const DEFAULT_TOL: f64 = 1e-10;
    pub const DEFAULT_MAX_ITERS: usize = 100_000;

    pub fn with_step(step: f64) -> Self {
        Self {
            step,
            tol: Self::DEFAULT_TOL,
            max_iters: Self::DEFAULT_MAX_ITERS,
        }
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        if !self.step.is_finite() || self.step <= 0.0 {
            return Err(NumericsError::InvalidSettings(format!(
                "step must be a positive finite number, got {}",
                self.step
            )));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(NumericsError::InvalidSettings(format!(
                "tol must be strictly positive, got {}",
                self.tol
            )));
        }
        if self.max_iters == 0 {
            return Err(NumericsError::InvalidSettings(
                "max_iters must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Output of an inner lower-level minimization.
#[derive(Debug, Clone)]
pub struct LLSolveResult {
    pub minimizer: Vec<f64>,
    /// Objective evaluated at `minimizer`.
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// True iff `grad_norm <= tol` was reached within `max_iters`.
    pub converged: bool,
}

/// Minimizes `objective` by `y_{k+1} = y_k - step * gradient(y_k)` until the
/// gradient norm drops below `settings.tol` or `settings.max_iters` is hit.
///
/// Monotone descent holds whenever the objective is L-smooth and `step <= 1/L`.
pub fn gd_minimize<F, G>(
    objective: F,
    gradient: G,
    y0: &[f64],
    settings: &GDSettings,
) -> Result<LLSolveResult, NumericsError>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    settings.validate()?;
    let mut y = y0.to_vec();
    let mut iterations = 0usize;
    let (grad_norm, converged) = loop {
        let grad = gradient(&y);
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite {
                what: "gradient",
                iteration: iterations,
            });
        }
        let norm = l2_norm(&grad);
        if norm <= settings.tol {
            break (norm, true);
        }
        if iterations >= settings.max_iters {
            break (norm, false);
        }
        for (yi, gi) in y.iter_mut().zip(&grad) {
            *yi -= settings.step * gi;
        }
        iterations += 1;
    };
    let value = objective(&y);
    if !value.is_finite() {
        return Err(NumericsError::NonFinite {
            what: "objective",
            iteration: iterations,
        });
    }
    Ok(LLSolveResult {
        minimizer: y,
        value,
        grad_norm,
        iterations,
        converged,
    })
}

/// Central finite differences `(fn(p + h e_i) - fn(p - h e_i)) / (2h)`.
pub fn finite_diff_grad<F>(fn_: F, point: &[f64], h: f64) -> Result<Vec<f64>, NumericsError>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(NumericsError::InvalidSettings(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let plus = fn_(&probe);
        probe[i] = point[i] - h;
        let minus = fn_(&probe);
        probe[i] = point[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericsError::NonFiniteProbe { coordinate: i });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `log(sigmoid(z))` without overflow for any finite `z`.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Softmax with the max logit subtracted before exponentiation.
pub fn stable_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gd_scalar_quadratic() {
        let res = gd_minimize(
            |y| y[0] * y[0],
            |y| vec![2.0 * y[0]],
            &[1.0],
            &GDSettings::with_step(0.25),
        )
        .unwrap();
        assert!(res.converged);
        assert!(res.minimizer[0].abs() < 1e-9);
        // halving error per step: O(log 1/tol) iterations
        assert!(res.iterations < 64, "iterations = {}", res.iterations);
        assert!((res.value - res.minimizer[0] * res.minimizer[0]).abs() <= 1e-12);
    }

    #[test]
    fn gd_example1_lower_level() {
        // g(0, y) = (y + 1)^2, minimizer -1
        let settings = GDSettings {
            step: 0.25,
            tol: 1e-10,
            max_iters: 100_000,
        };
        let res = gd_minimize(
            |y| (y[0] + 1.0) * (y[0] + 1.0),
            |y| vec![2.0 * (y[0] + 1.0)],
            &[5.0],
            &settings,
        )
        .unwrap();
        assert!(res.converged);
        assert!((res.minimizer[0] + 1.0).abs() <= 1e-9);

        // penalized objective f/gamma + g at x=0, gamma=10: minimizer -1.5
        let res = gd_minimize(
            |y| y[0] + (y[0] + 1.0) * (y[0] + 1.0),
            |y| vec![1.0 + 2.0 * (y[0] + 1.0)],
            &[0.0],
            &settings,
        )
        .unwrap();
        assert!((res.minimizer[0] + 1.5).abs() <= 1e-9);
    }

    #[test]
    fn gd_reports_divergence() {
        let err = gd_minimize(
            |y| y[0].exp(),
            |y| vec![y[0].exp()],
            &[f64::MAX.ln() + 1.0],
            &GDSettings::with_step(1.0),
        )
        .unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { .. }));
    }

    #[test]
    fn gd_rejects_bad_settings() {
        let res = gd_minimize(
            |y| y[0] * y[0],
            |y| vec![2.0 * y[0]],
            &[1.0],
            &GDSettings {
                step: -1.0,
                tol: 1e-10,
                max_iters: 10,
            },
        );
        assert!(matches!(res, Err(NumericsError::InvalidSettings(_))));
    }

    #[test]
    fn fd_constant_and_quadratic() {
        let g = finite_diff_grad(|_| 7.5, &[1.0, -2.0, 3.0], 1e-6).unwrap();
        assert!(g.iter().all(|v| v.abs() == 0.0));

        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-6).unwrap();
        assert!((g[0] - 6.0).abs() <= 1e-6);
    }

    #[test]
    fn fd_names_offending_coordinate() {
        // finite on the p[0] axis, NaN as soon as p[1] moves off zero
        let err = finite_diff_grad(|p| p[0] + (-p[1].abs()).sqrt(), &[0.0, 0.0], 1e-6).unwrap_err();
        match err {
            NumericsError::NonFiniteProbe { coordinate } => assert_eq!(coordinate, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn log_sigmoid_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        let v = log_sigmoid(-745.0);
        assert!(v.is_finite());
        assert!((v + 745.0).abs() < 1e-9);
        assert!(log_sigmoid(1000.0).is_finite());
        assert!(log_sigmoid(1000.0) <= 0.0);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let p = stable_softmax(&[1000.0, 1000.0]);
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert!((p[1] - 0.5).abs() < 1e-15);
        let p = stable_softmax(&[2.0, 1.0]);
        assert!((p[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
