//! Executes one configured experiment (`run`) or a family of them (`sweep`).

use std::path::{Path, PathBuf};

use pbgd_core::diagnostics::{
    self, approx_gap, flatness_report, kkt_residual, FlatConsts, LipConsts,
};
use pbgd_core::numerics::l2_norm;
use pbgd_core::problems::BilevelProblem;
use pbgd_core::solvers::{f2sa_sl_run, pbgd_free_run, pbgd_oracle_run, IterateRecord};

use crate::config::{build_problem, toy_peft_spec, ExperimentConfig, ProblemKind, RawConfig, SolverKind};
use crate::csvio::{flatness_csv, fmt17, gaps_csv, trajectory_csv, write_text};
use crate::HarnessError;

pub struct RunArtifacts {
    pub records: Vec<IterateRecord>,
    pub problem: BilevelProblem,
    pub output_dir: PathBuf,
}

pub fn dispatch_solver(
    solver: SolverKind,
    problem: &BilevelProblem,
    cfg: &pbgd_core::solvers::SolverConfig,
) -> Result<Vec<IterateRecord>, HarnessError> {
    let records = match solver {
        SolverKind::PbgdFree => pbgd_free_run(problem, cfg)?,
        SolverKind::F2saSl => f2sa_sl_run(problem, cfg)?,
        SolverKind::PbgdOracle => pbgd_oracle_run(problem, cfg)?,
    };
    Ok(records)
}

/// Runs the configured solver, writing `trajectory.csv`, any requested
/// diagnostic CSVs, and a `summary` text file into the output directory.
pub fn run(config: &ExperimentConfig) -> Result<RunArtifacts, HarnessError> {
    let problem = build_problem(config.problem, &config.toy_peft)?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;

    let mut records = dispatch_solver(config.solver, &problem, &config.solver_config)?;

    if config.diagnostics.g_gap {
        for r in &mut records {
            let v = diagnostics::lower_level_value(&problem, &r.x, config.solver_config.oracle_tol)?;
            r.g_gap = Some(problem.eval_g(&r.x, &r.y_gamma) - v);
        }
    }

    write_text(
        &out.join("trajectory.csv"),
        &trajectory_csv(&records, problem.dim_x(), problem.dim_y()),
    )?;

    let last = records.last().expect("run always records the final state");

    if let Some(flat) = &config.diagnostics.flatness {
        let xs: Vec<Vec<f64>> = records.iter().map(|r| r.x.clone()).collect();
        let report = flatness_report(
            &problem,
            &xs,
            flat.c,
            flat.alpha,
            config.solver_config.gamma,
            config.solver_config.oracle_tol,
        )?;
        write_text(
            &out.join("flatness.csv"),
            &flatness_csv(&report, problem.dim_x()),
        )?;
    }

    if let Some(gaps) = &config.diagnostics.gaps {
        let mut reports = Vec::new();
        for &gamma in &gaps.gamma_grid {
            reports.push(approx_gap(
                &problem,
                &last.x,
                gamma,
                config.solver_config.oracle_tol,
                LipConsts {
                    l_f0: gaps.l_f0,
                    mu: gaps.mu,
                },
                FlatConsts {
                    c: gaps.c,
                    alpha: gaps.alpha,
                    delta: gaps.delta,
                },
            )?);
        }
        write_text(&out.join("gaps.csv"), &gaps_csv(&reports))?;
    }

    let mut summary = String::new();
    summary.push_str(&format!("problem = {}\n", config.problem.as_str()));
    summary.push_str(&format!("solver = {}\n", config.solver.as_str()));
    summary.push_str(&format!("outer_iterations = {}\n", last.t));
    summary.push_str(&format!(
        "final_x = {}\n",
        last.x.iter().map(|&v| fmt17(v)).collect::<Vec<_>>().join(",")
    ));
    summary.push_str(&format!(
        "final_y_gamma = {}\n",
        last.y_gamma
            .iter()
            .map(|&v| fmt17(v))
            .collect::<Vec<_>>()
            .join(",")
    ));
    if let Some(y_g) = &last.y_g {
        summary.push_str(&format!(
            "final_y_g = {}\n",
            y_g.iter().map(|&v| fmt17(v)).collect::<Vec<_>>().join(",")
        ));
    }
    summary.push_str(&format!("final_f = {}\n", fmt17(last.f_val)));
    summary.push_str(&format!(
        "final_g = {}\n",
        fmt17(problem.eval_g(&last.x, &last.y_gamma))
    ));
    let (fx, _) = problem.grad_f(&last.x, &last.y_gamma);
    summary.push_str(&format!("final_grad_x_f_norm = {}\n", fmt17(l2_norm(&fx))));
    let (_, fy) = problem.grad_f(&last.x, &last.y_gamma);
    let (_, gy) = problem.grad_g(&last.x, &last.y_gamma);
    let pen_grad: Vec<f64> = (0..fy.len())
        .map(|i| fy[i] / config.solver_config.gamma + gy[i])
        .collect();
    summary.push_str(&format!(
        "final_grad_y_penalized_norm = {}\n",
        fmt17(l2_norm(&pen_grad))
    ));
    summary.push_str(&format!("final_update_norm = {}\n", fmt17(last.update_norm)));
    summary.push_str(&format!("ll_grad_evals = {}\n", last.ll_grad_evals));
    summary.push_str(&format!("wall_nanos = {}\n", last.wall_nanos));
    summary.push_str(&format!("records = {}\n", records.len()));

    if config.diagnostics.kkt {
        let res = kkt_residual(
            &problem,
            &last.x,
            config.solver_config.gamma,
            config.solver_config.oracle_tol,
        )?;
        summary.push_str(&format!("kkt_r_x = {}\n", fmt17(res.r_x)));
        summary.push_str(&format!("kkt_r_y = {}\n", fmt17(res.r_y)));
        summary.push_str(&format!("kkt_r_feas = {}\n", fmt17(res.r_feas)));
        summary.push_str(&format!("kkt_w_norm = {}\n", fmt17(res.w_norm)));
    }

    // dataset provenance: echo the rows actually used
    if config.problem == ProblemKind::ToyPeft {
        let spec = toy_peft_spec(&config.toy_peft)?;
        if let Some(path) = &config.toy_peft.dataset_file {
            summary.push_str(&format!("dataset_file = {}\n", path.display()));
        }
        for (i, rec) in spec.sft_dataset.iter().enumerate() {
            summary.push_str(&format!(
                "dataset.sft.{i} = {},{}\n",
                rec.features
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
                rec.label
            ));
        }
        for (i, rec) in spec.dpo_dataset.iter().enumerate() {
            summary.push_str(&format!(
                "dataset.dpo.{i} = {};{}\n",
                rec.preferred
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
                rec.rejected
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ));
        }
    }

    write_text(&out.join("summary"), &summary)?;

    Ok(RunArtifacts {
        records,
        problem,
        output_dir: out.clone(),
    })
}

/// Numeric keys that `sweep` may vary.
const SWEEPABLE: &[&str] = &[
    "solver.gamma",
    "solver.eta",
    "solver.eta_gamma",
    "solver.eta_g",
    "solver.inner_k",
    "solver.outer_t",
    "solver.oracle_tol",
    "solver.stop_update_tol",
    "problem.beta",
    "problem.reg_weight",
    "problem.ref_x",
    "problem.ref_y",
];

pub struct SweepOutcome {
    /// Per-value results: (value, error message if the run failed).
    pub runs: Vec<(f64, Option<String>)>,
    pub first_failure: Option<HarnessError>,
}

/// One run per value of `param`, each in its own subdirectory, plus a combined
/// `sweep_summary.csv`. Individual failures are recorded and do not stop the
/// sweep.
pub fn sweep(
    raw: &RawConfig,
    param: &str,
    values: &[f64],
    out_root: &Path,
) -> Result<SweepOutcome, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Config(
            "sweep needs at least one value".into(),
        ));
    }
    if !SWEEPABLE.contains(&param) {
        return Err(HarnessError::Config(format!(
            "`{param}` is not a sweepable numeric config key (one of {})",
            SWEEPABLE.join(", ")
        )));
    }
    std::fs::create_dir_all(out_root).map_err(|e| HarnessError::io(out_root, e))?;

    let mut summary = String::from("param,value,status,final_f,final_g,ll_grad_evals\n");
    let mut runs = Vec::new();
    let mut first_failure: Option<HarnessError> = None;

    for &value in values {
        let mut overridden = raw.clone();
        overridden.set(param, value.to_string());
        let sub = out_root.join(format!("{param}={value}"));
        let result = ExperimentConfig::from_raw(&overridden).and_then(|mut cfg| {
            cfg.output_dir = sub.clone();
            run(&cfg)
        });
        match result {
            Ok(artifacts) => {
                let last = artifacts.records.last().unwrap();
                let final_g = artifacts.problem.eval_g(&last.x, &last.y_gamma);
                summary.push_str(&format!(
                    "{param},{value},ok,{},{},{}\n",
                    fmt17(last.f_val),
                    fmt17(final_g),
                    last.ll_grad_evals
                ));
                runs.push((value, None));
            }
            Err(err) => {
                summary.push_str(&format!("{param},{value},failed: {err},,,\n"));
                runs.push((value, Some(err.to_string())));
                if first_failure.is_none() {
                    first_failure = Some(err);
                }
            }
        }
    }

    write_text(&out_root.join("sweep_summary.csv"), &summary)?;
    Ok(SweepOutcome {
        runs,
        first_failure,
    })
}
