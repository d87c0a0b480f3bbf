//! Measurable quantities from the penalty analysis: the pointwise flatness
//! constant `delta(x)`, approximation gaps with their theoretical bounds, the
//! omitted-bias decomposition of the penalty gradient, and KKT residuals.
//!
//! Every operation here solves the lower-level problems by warm-started
//! gradient descent to a tight tolerance, standing in for the exact
//! minimizers `y*_g(x)` and `y*_gamma(x)`. The built-in problems have unique
//! lower-level minimizers per `x`, so the hyper-objective reduces to
//! `phi(x) = f(x, y*_g(x))`; diagnostics rely on that assumption.

use thiserror::Error;

use crate::numerics::{gd_minimize, l2_dist, l2_norm, GDSettings, LLSolveResult, NumericsError};
use crate::problems::BilevelProblem;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("lower-level solve of the {which} objective failed to converge: gradient norm {grad_norm:.3e} after {iterations} iterations")]
    InnerSolveFailed {
        which: &'static str,
        grad_norm: f64,
        iterations: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Constants for the Lipschitz-side approximation bound.
#[derive(Debug, Clone, Copy)]
pub struct LipConsts {
    /// Lipschitz constant of `f(x, .)` at the lower-level solution.
    pub l_f0: f64,
    /// PL constant of `g(x, .)`.
    pub mu: f64,
}

/// Constants certifying the flatness condition.
#[derive(Debug, Clone, Copy)]
pub struct FlatConsts {
    pub c: f64,
    pub alpha: f64,
    pub delta: f64,
}

/// Decomposition of the penalty gradient at `x`: `grad = f_part + value_fn_part`
/// with `f_part = grad_x f(x, y*_gamma)` and
/// `value_fn_part = gamma (grad_x g(x, y*_gamma) - grad_x g(x, y*_g))`, the
/// term the value-function-free update omits.
#[derive(Debug, Clone)]
pub struct PenaltyGradient {
    pub grad: Vec<f64>,
    pub f_part: Vec<f64>,
    pub value_fn_part: Vec<f64>,
}

/// Penalty approximation gap at one `(x, gamma)` with both theoretical bounds.
#[derive(Debug, Clone, Copy)]
pub struct GapReport {
    pub gamma: f64,
    /// Hyper-objective `phi(x) = f(x, y*_g(x))`.
    pub phi: f64,
    pub f_gamma: f64,
    pub value_gap: f64,
    pub y_dist: f64,
    /// `l_f0^2 / (2 mu gamma)`.
    pub lip_bound: f64,
    /// `c^{2/(2-a)} (2a)^{a/(2-a)} (1 - a/2) (mu gamma)^{-a/(2-a)} + delta`.
    pub flat_bound: f64,
}

/// Stationarity and feasibility residuals of the gradient-constrained
/// reformulation, with multiplier `w = gamma (y*_gamma - y*_g)`.
#[derive(Debug, Clone, Copy)]
pub struct KKTResidual {
    pub r_x: f64,
    pub r_y: f64,
    /// `|grad_y g(x, y*_gamma)|^2`.
    pub r_feas: f64,
    pub w_norm: f64,
}

/// One point of a flatness trace.
#[derive(Debug, Clone)]
pub struct FlatnessPoint {
    pub x: Vec<f64>,
    pub y_g: Vec<f64>,
    pub y_gamma: Vec<f64>,
    pub f_gap: f64,
    pub dist: f64,
    pub delta_x: f64,
}

#[derive(Debug, Clone)]
pub struct FlatnessReport {
    pub c: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub points: Vec<FlatnessPoint>,
}

/// Empirical difference quotient of `delta(x)` over one pair of nearby points.
#[derive(Debug, Clone, Copy)]
pub struct DeltaLipschitzSample {
    pub dist_x: f64,
    pub delta_diff: f64,
    /// `delta_diff / dist_x`, defined as 0 for an identical pair.
    pub ratio: f64,
}

/// Solves `min_y g(x, y)` to `tol` from the zero vector.
pub fn solve_y_g(
    problem: &BilevelProblem,
    x: &[f64],
    tol: f64,
) -> Result<LLSolveResult, DiagnosticsError> {
    let settings = GDSettings {
        step: problem.inner_defaults().g_step,
        tol,
        max_iters: GDSettings::DEFAULT_MAX_ITERS,
    };
    let res = gd_minimize(
        |y| problem.eval_g(x, y),
        |y| problem.grad_g(x, y).1,
        &vec![0.0; problem.dim_y()],
        &settings,
    )?;
    if !res.converged {
        return Err(DiagnosticsError::InnerSolveFailed {
            which: "g",
            grad_norm: res.grad_norm,
            iterations: res.iterations,
        });
    }
    Ok(res)
}

/// Solves `min_y f(x, y)/gamma + g(x, y)` to `tol`, warm-started from `y_init`
/// (typically the solution of the plain lower-level problem).
pub fn solve_y_gamma(
    problem: &BilevelProblem,
    x: &[f64],
    gamma: f64,
    tol: f64,
    y_init: &[f64],
) -> Result<LLSolveResult, DiagnosticsError> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(DiagnosticsError::InvalidParam(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    let settings = GDSettings {
        step: problem.inner_defaults().penalized_step(gamma),
        tol,
        max_iters: GDSettings::DEFAULT_MAX_ITERS,
    };
    let res = gd_minimize(
        |y| problem.eval_f(x, y) / gamma + problem.eval_g(x, y),
        |y| {
            let (_, fy) = problem.grad_f(x, y);
            let (_, gy) = problem.grad_g(x, y);
            (0..y.len()).map(|i| fy[i] / gamma + gy[i]).collect()
        },
        y_init,
        &settings,
    )?;
    if !res.converged {
        return Err(DiagnosticsError::InnerSolveFailed {
            which: "penalized",
            grad_norm: res.grad_norm,
            iterations: res.iterations,
        });
    }
    Ok(res)
}

fn solve_both(
    problem: &BilevelProblem,
    x: &[f64],
    gamma: f64,
    tol: f64,
) -> Result<(LLSolveResult, LLSolveResult), DiagnosticsError> {
    let y_g = solve_y_g(problem, x, tol)?;
    let y_gamma = solve_y_gamma(problem, x, gamma, tol, &y_g.minimizer)?;
    Ok((y_g, y_gamma))
}

/// The value function `v(x) = min_y g(x, y)`.
pub fn lower_level_value(
    problem: &BilevelProblem,
    x: &[f64],
    tol: f64,
) -> Result<f64, DiagnosticsError> {
    Ok(solve_y_g(problem, x, tol)?.value)
}

/// The penalty gradient at `x` split into its two parts.
pub fn penalty_gradient(
    problem: &BilevelProblem,
    x: &[f64],
    gamma: f64,
    oracle_tol: f64,
) -> Result<PenaltyGradient, DiagnosticsError> {
    let (y_g, y_gamma) = solve_both(problem, x, gamma, oracle_tol)?;
    let (f_part, _) = problem.grad_f(x, &y_gamma.minimizer);
    let (gx_gamma, _) = problem.grad_g(x, &y_gamma.minimizer);
    let (gx_g, _) = problem.grad_g(x, &y_g.minimizer);
    let value_fn_part: Vec<f64> = (0..x.len())
        .map(|i| gamma * (gx_gamma[i] - gx_g[i]))
        .collect();
    let grad: Vec<f64> = (0..x.len()).map(|i| f_part[i] + value_fn_part[i]).collect();
    Ok(PenaltyGradient {
        grad,
        f_part,
        value_fn_part,
    })
}

/// The penalized hyper-objective `F_gamma(x) = f(x, y*_gamma) + gamma (g(x, y*_gamma) - v(x))`.
pub fn penalized_value(
    problem: &BilevelProblem,
    x: &[f64],
    gamma: f64,
    oracle_tol: f64,
) -> Result<f64, DiagnosticsError> {
    let (y_g, y_gamma) = solve_both(problem, x, gamma, oracle_tol)?;
    Ok(problem.eval_f(x, &y_gamma.minimizer)
        + gamma * (problem.eval_g(x, &y_gamma.minimizer) - y_g.value))
}

/// The pointwise flatness witness
/// `delta(x) = max(0, |f(x, y*_g) - f(x, y*_gamma)| - c |y*_g - y*_gamma|^alpha)`.
pub fn compute_delta(
    problem: &BilevelProblem,
    x: &[f64],
    c: f64,
    alpha: f64,
    gamma: f64,
    oracle_tol: f64,
) -> Result<f64, DiagnosticsError> {
    Ok(flatness_point(problem, x, c, alpha, gamma, oracle_tol)?.delta_x)
}

fn flatness_point(
    problem: &BilevelProblem,
    x: &[f64],
    c: f64,
    alpha: f64,
    gamma: f64,
    oracle_tol: f64,
) -> Result<FlatnessPoint, DiagnosticsError> {
    if c < 0.0 {
        return Err(DiagnosticsError::InvalidParam(format!(
            "flatness modulus c must be non-negative, got {c}"
        )));
    }
    if !(alpha.is_finite() && alpha > 1.0) {
        return Err(DiagnosticsError::InvalidParam(format!(
            "flatness exponent alpha must exceed 1, got {alpha}"
        )));
    }
    let (y_g, y_gamma) = solve_both(problem, x, gamma, oracle_tol)?;
    let f_gap =
        (problem.eval_f(x, &y_g.minimizer) - problem.eval_f(x, &y_gamma.minimizer)).abs();
    let dist = l2_dist(&y_g.minimizer, &y_gamma.minimizer);
    let delta_x = (f_gap - c * dist.powf(alpha)).max(0.0);
    Ok(FlatnessPoint {
        x: x.to_vec(),
        y_g: y_g.minimizer,
        y_gamma: y_gamma.minimizer,
        f_gap,
        dist,
        delta_x,
    })
}

/// Evaluates the flatness witness over a list of points.
pub fn flatness_report(
    problem: &BilevelProblem,
    xs: &[Vec<f64>],
    c: f64,
    alpha: f64,
    gamma: f64,
    oracle_tol: f64,
) -> Result<FlatnessReport, DiagnosticsError> {
    let points = xs
        .iter()
        .map(|x| flatness_point(problem, x, c, alpha, gamma, oracle_tol))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FlatnessReport {
        c,
        alpha,
        gamma,
        points,
    })
}

/// `l_f0^2 / (2 mu gamma)`, the Lipschitz-side gap bound.
pub fn lip_bound(lip: LipConsts, gamma: f64) -> f64 {
    lip.l_f0 * lip.l_f0 / (2.0 * lip.mu * gamma)
}

/// The flatness-side gap bound with its explicit constant:
/// `c^{2/(2-a)} (2a)^{a/(2-a)} (1 - a/2) (mu gamma)^{-a/(2-a)} + delta`.
pub fn flat_bound(flat: FlatConsts, mu: f64, gamma: f64) -> f64 {
    let a = flat.alpha;
    let e = a / (2.0 - a);
    flat.c.powf(2.0 / (2.0 - a)) * (2.0 * a).powf(e) * (1.0 - a / 2.0) * (mu * gamma).powf(-e)
        + flat.delta
}

/// Measures the value gap `|phi(x) - F_gamma(x)|` and the minimizer distance,
/// reporting them next to both bounds evaluated with the supplied constants.
pub fn approx_gap(
    problem: &BilevelProblem,
    x: &[f64],
    gamma: f64,
    oracle_tol: f64,
    lip: LipConsts,
    flat: FlatConsts,
) -> Result<GapReport, DiagnosticsError> {
    let (y_g, y_gamma) = solve_both(problem, x, gamma, oracle_tol)?;
    let phi = problem.eval_f(x, &y_g.minimizer);
    let f_gamma = problem.eval_f(x, &y_gamma.minimizer)
        + gamma * (problem.eval_g(x, &y_gamma.minimizer) - y_g.value);
    Ok(GapReport {
        gamma,
        phi,
        f_gamma,
        value_gap: (phi - f_gamma).abs(),
        y_dist: l2_dist(&y_g.minimizer, &y_gamma.minimizer),
        lip_bound: lip_bound(lip, gamma),
        flat_bound: flat_bound(flat, lip.mu, gamma),
    })
}

/// KKT residuals of `min f s.t. grad_y g = 0` at `(x, y*_gamma)` with the
/// penalty multiplier `w = gamma (y*_gamma - y*_g)`. The cross-derivative
/// terms are realized through gradient differences, keeping the measurement
/// first-order.
pub fn kkt_residual(
    problem: &BilevelProblem,
    x: &[f64],
    gamma: f64,
    oracle_tol: f64,
) -> Result<KKTResidual, DiagnosticsError> {
    let (y_g, y_gamma) = solve_both(problem, x, gamma, oracle_tol)?;
    let (fx, fy) = problem.grad_f(x, &y_gamma.minimizer);
    let (gx_gamma, gy_gamma) = problem.grad_g(x, &y_gamma.minimizer);
    let (gx_g, gy_g) = problem.grad_g(x, &y_g.minimizer);
    let r_x = l2_norm(
        &(0..x.len())
            .map(|i| fx[i] + gamma * (gx_gamma[i] - gx_g[i]))
            .collect::<Vec<_>>(),
    );
    let r_y = l2_norm(
        &(0..fy.len())
            .map(|i| fy[i] + gamma * (gy_gamma[i] - gy_g[i]))
            .collect::<Vec<_>>(),
    );
    let r_feas = {
        let n = l2_norm(&gy_gamma);
        n * n
    };
    let w_norm = gamma * l2_dist(&y_gamma.minimizer, &y_g.minimizer);
    Ok(KKTResidual {
        r_x,
        r_y,
        r_feas,
        w_norm,
    })
}

/// Empirical difference quotients `|delta(x) - delta(x')| / |x - x'|` for
/// pairs of nearby points, for inspection against the `O(c gamma^{-(alpha-1)})`
/// Lipschitz rate.
pub fn delta_lipschitz_probe(
    problem: &BilevelProblem,
    x_pairs: &[(Vec<f64>, Vec<f64>)],
    c: f64,
    alpha: f64,
    gamma: f64,
    oracle_tol: f64,
) -> Result<Vec<DeltaLipschitzSample>, DiagnosticsError> {
    let mut out = Vec::with_capacity(x_pairs.len());
    for (a, b) in x_pairs {
        let da = compute_delta(problem, a, c, alpha, gamma, oracle_tol)?;
        let db = compute_delta(problem, b, c, alpha, gamma, oracle_tol)?;
        let dist_x = l2_dist(a, b);
        let delta_diff = (da - db).abs();
        let ratio = if dist_x > 0.0 { delta_diff / dist_x } else { 0.0 };
        out.push(DeltaLipschitzSample {
            dist_x,
            delta_diff,
            ratio,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_example1, make_example3, make_toy_peft, ToyPeftSpec};
    use std::sync::Arc;

    const TOL: f64 = 1e-10;

    /// f(x,y) = x^2 (independent of y), g as in example 1.
    fn y_free_problem() -> BilevelProblem {
        BilevelProblem::from_parts(
            "y_free",
            1,
            1,
            Arc::new(|x: &[f64], _y: &[f64]| x[0] * x[0]),
            Arc::new(|x: &[f64], y: &[f64]| {
                let r = y[0] - x[0] + 1.0;
                r * r
            }),
            Arc::new(|x: &[f64], _y: &[f64]| (vec![2.0 * x[0]], vec![0.0])),
            Arc::new(|x: &[f64], y: &[f64]| {
                let r = y[0] - x[0] + 1.0;
                (vec![-2.0 * r], vec![2.0 * r])
            }),
            None,
            crate::problems::InnerSolveDefaults {
                g_step: 0.25,
                smooth_f_y: 0.0,
                smooth_g_y: 2.0,
            },
        )
    }

    #[test]
    fn penalty_gradient_example1_decomposition() {
        let p = make_example1();
        let pg = penalty_gradient(&p, &[0.0], 10.0, TOL).unwrap();
        assert!((pg.grad[0] - 10.0).abs() <= 1e-6);
        assert!(pg.f_part[0].abs() <= 1e-6);
        assert!((pg.value_fn_part[0] - 10.0).abs() <= 1e-6);
        // matches the closed form 2x + 10 anywhere
        for x in [-7.5, -5.0, -1.25, 0.0, 3.0] {
            let pg = penalty_gradient(&p, &[x], 10.0, TOL).unwrap();
            assert!((pg.grad[0] - (2.0 * x + 10.0)).abs() <= 1e-6, "x = {x}");
        }
    }

    #[test]
    fn value_fn_part_vanishes_when_f_ignores_y() {
        let p = y_free_problem();
        for gamma in [1.0, 10.0, 100.0] {
            let pg = penalty_gradient(&p, &[2.0], gamma, TOL).unwrap();
            assert!(l2_norm(&pg.value_fn_part) <= 1e-8, "gamma = {gamma}");
        }
    }

    #[test]
    fn delta_zero_when_f_ignores_y() {
        let p = y_free_problem();
        let d = compute_delta(&p, &[3.0], 5.0, 1.1, 15.0, TOL).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn delta_matches_manual_assembly() {
        // independent route: assemble delta from the separate oracle solves
        let p = make_example3();
        let (c, alpha, gamma) = (5.0, 1.1, 15.0);
        let d = compute_delta(&p, &[2.0], c, alpha, gamma, TOL).unwrap();
        let y_g = solve_y_g(&p, &[2.0], TOL).unwrap();
        let y_gamma = solve_y_gamma(&p, &[2.0], gamma, TOL, &y_g.minimizer).unwrap();
        let f_gap = (p.eval_f(&[2.0], &y_g.minimizer) - p.eval_f(&[2.0], &y_gamma.minimizer)).abs();
        let dist = l2_dist(&y_g.minimizer, &y_gamma.minimizer);
        assert!((d - (f_gap - c * dist.powf(alpha)).max(0.0)).abs() <= 1e-12);
    }

    #[test]
    fn delta_scale_consistency() {
        let p = make_example3();
        let d1 = compute_delta(&p, &[0.0], 5.0, 1.1, 15.0, TOL).unwrap();
        let d2 = compute_delta(&p, &[0.0], 10.0, 1.1, 15.0, TOL).unwrap();
        assert!(d2 <= d1);
    }

    #[test]
    fn toy_peft_delta_along_plausible_iterates() {
        let p = make_toy_peft(&ToyPeftSpec::table_defaults()).unwrap();
        for x in [-2.0, -0.5, 0.0, 0.4, 1.0] {
            let d = compute_delta(&p, &[x], 0.5, 1.5, 15.0, TOL).unwrap();
            assert!(d <= 5e-4, "delta({x}) = {d}");
        }
    }

    #[test]
    fn gap_report_example1_pinned() {
        let p = make_example1();
        let rep = approx_gap(
            &p,
            &[0.0],
            10.0,
            TOL,
            LipConsts { l_f0: 10.0, mu: 2.0 },
            FlatConsts {
                c: 10.0,
                alpha: 1.1,
                delta: 0.36,
            },
        )
        .unwrap();
        assert!((rep.phi - (-10.0)).abs() <= 1e-8);
        assert!((rep.f_gamma - (-12.5)).abs() <= 1e-8);
        assert!((rep.value_gap - 2.5).abs() <= 1e-8);
        assert!((rep.y_dist - 0.5).abs() <= 1e-8);
        assert!((rep.lip_bound - 2.5).abs() <= 1e-12);
    }

    #[test]
    fn gap_zero_when_f_ignores_y() {
        let p = y_free_problem();
        let rep = approx_gap(
            &p,
            &[1.0],
            10.0,
            TOL,
            LipConsts { l_f0: 1.0, mu: 2.0 },
            FlatConsts {
                c: 1.0,
                alpha: 1.1,
                delta: 0.0,
            },
        )
        .unwrap();
        assert!(rep.value_gap <= 1e-8);
        assert!(rep.y_dist <= 1e-8);
    }

    #[test]
    fn kkt_example1_stationary_point() {
        let p = make_example1();
        let r = kkt_residual(&p, &[-5.0], 10.0, TOL).unwrap();
        assert!(r.r_x <= 1e-6, "r_x = {}", r.r_x);
    }

    #[test]
    fn kkt_y_free_structure() {
        let p = y_free_problem();
        let r = kkt_residual(&p, &[2.0], 10.0, TOL).unwrap();
        assert!(r.w_norm <= 1e-7);
        assert!((r.r_x - 4.0).abs() <= 1e-7); // |grad_x f| = |2x|
        assert!(r.r_feas <= 1e-12);
    }

    #[test]
    fn kkt_example3_near_limit_point() {
        let p = make_example3();
        // any x works: the problem is shift-invariant
        let r = kkt_residual(&p, &[0.35], 15.0, TOL).unwrap();
        assert!(r.r_feas <= 1e-2, "r_feas = {}", r.r_feas);
        assert!(r.r_y <= 1e-1, "r_y = {}", r.r_y);
    }

    #[test]
    fn probe_trivial_cases() {
        let p = y_free_problem();
        let samples = delta_lipschitz_probe(
            &p,
            &[(vec![0.0], vec![1e-3]), (vec![2.0], vec![2.0])],
            5.0,
            1.1,
            15.0,
            TOL,
        )
        .unwrap();
        assert_eq!(samples[0].delta_diff, 0.0);
        assert_eq!(samples[1].ratio, 0.0);
        assert!(samples.iter().all(|s| s.ratio.is_finite()));
    }

    #[test]
    fn rejects_bad_flatness_params() {
        let p = make_example1();
        assert!(matches!(
            compute_delta(&p, &[0.0], -1.0, 1.1, 10.0, TOL),
            Err(DiagnosticsError::InvalidParam(_))
        ));
        assert!(matches!(
            compute_delta(&p, &[0.0], 1.0, 1.0, 10.0, TOL),
            Err(DiagnosticsError::InvalidParam(_))
        ));
        assert!(matches!(
            solve_y_gamma(&p, &[0.0], -1.0, TOL, &[0.0]),
            Err(DiagnosticsError::InvalidParam(_))
        ));
    }
}
