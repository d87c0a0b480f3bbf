//! Flat key-value experiment configuration: `section.key = value`, one entry
//! per line, `#` comments. Chosen over nested formats so experiment
//! provenance diffs line by line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pbgd_core::problems::{
    make_example1, make_example3, make_toy_peft, parse_dataset_line, BilevelProblem,
    DatasetRecord, ToyPeftSpec,
};
use pbgd_core::solvers::SolverConfig;

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Example1,
    Example3,
    ToyPeft,
}

impl ProblemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProblemKind::Example1 => "example1",
            ProblemKind::Example3 => "example3",
            ProblemKind::ToyPeft => "toy_peft",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    PbgdFree,
    F2saSl,
    PbgdOracle,
}

impl SolverKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SolverKind::PbgdFree => "pbgd_free",
            SolverKind::F2saSl => "f2sa_sl",
            SolverKind::PbgdOracle => "pbgd_oracle",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyPeftOptions {
    pub dataset_file: Option<PathBuf>,
    pub beta: f64,
    pub reg_weight: f64,
    pub ref_params: (f64, f64),
    pub include_extra_sft: bool,
}

impl Default for ToyPeftOptions {
    fn default() -> Self {
        let spec = ToyPeftSpec::table_defaults();
        Self {
            dataset_file: None,
            beta: spec.beta,
            reg_weight: spec.reg_weight,
            ref_params: spec.ref_params,
            include_extra_sft: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FlatnessOptions {
    pub c: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct GapsOptions {
    pub gamma_grid: Vec<f64>,
    pub l_f0: f64,
    pub mu: f64,
    pub c: f64,
    pub alpha: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Default)]
pub struct DiagnosticsConfig {
    /// Fill the per-record `g_gap` column (one oracle solve per record).
    pub g_gap: bool,
    pub flatness: Option<FlatnessOptions>,
    pub gaps: Option<GapsOptions>,
    pub kkt: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    pub toy_peft: ToyPeftOptions,
    pub solver: SolverKind,
    pub solver_config: SolverConfig,
    pub diagnostics: DiagnosticsConfig,
    pub output_dir: PathBuf,
}

/// Parsed key-value entries with line numbers, before interpretation.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, (String, usize)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut entries = BTreeMap::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(HarnessError::Config(format!(
                    "line {line_no}: expected `key = value`, got `{raw_line}`"
                )));
            };
            let key = line[..eq].trim().to_string();
            let value = line[eq + 1..].trim().to_string();
            if key.is_empty() {
                return Err(HarnessError::Config(format!(
                    "line {line_no}: empty key in `{raw_line}`"
                )));
            }
            entries.insert(key, (value, line_no));
        }
        Ok(Self { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    /// Overrides (or inserts) one key, as done by `sweep`.
    pub fn set(&mut self, key: &str, value: String) {
        let line = self.entries.get(key).map(|(_, l)| *l).unwrap_or(0);
        self.entries.insert(key.to_string(), (value, line));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }
}

/// Tracks which keys were consumed so typos surface as errors.
struct Reader<'a> {
    raw: &'a RawConfig,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl<'a> Reader<'a> {
    fn new(raw: &'a RawConfig) -> Self {
        Self {
            raw,
            used: Default::default(),
        }
    }

    fn get(&self, key: &str) -> Option<&'a str> {
        let hit = self.raw.entries.get(key);
        if hit.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        hit.map(|(v, _)| v.as_str())
    }

    fn line(&self, key: &str) -> usize {
        self.raw.entries.get(key).map(|(_, l)| *l).unwrap_or(0)
    }

    fn f64_opt(&self, key: &str) -> Result<Option<f64>, HarnessError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<f64>().map(Some).map_err(|_| {
                HarnessError::Config(format!(
                    "key `{key}` (line {}): cannot parse `{v}` as a number",
                    self.line(key)
                ))
            }),
        }
    }

    fn usize_opt(&self, key: &str) -> Result<Option<usize>, HarnessError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<usize>().map(Some).map_err(|_| {
                HarnessError::Config(format!(
                    "key `{key}` (line {}): cannot parse `{v}` as a non-negative integer",
                    self.line(key)
                ))
            }),
        }
    }

    fn bool_opt(&self, key: &str) -> Result<Option<bool>, HarnessError> {
        match self.get(key) {
            None => Ok(None),
            Some("true") => Ok(Some(true)),
            Some("false") => Ok(Some(false)),
            Some(v) => Err(HarnessError::Config(format!(
                "key `{key}` (line {}): expected `true` or `false`, got `{v}`",
                self.line(key)
            ))),
        }
    }

    fn vec_f64_opt(&self, key: &str) -> Result<Option<Vec<f64>>, HarnessError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| {
                    HarnessError::Config(format!(
                        "key `{key}` (line {}): cannot parse `{v}` as a comma-separated number list",
                        self.line(key)
                    ))
                }),
        }
    }

    fn finish(self) -> Result<(), HarnessError> {
        let used = self.used.into_inner();
        for key in self.raw.entries.keys() {
            if !used.contains(key) {
                return Err(HarnessError::Config(format!(
                    "unknown config key `{key}` (line {})",
                    self.raw.entries[key].1
                )));
            }
        }
        Ok(())
    }
}

/// Per-problem defaults for fields the config file leaves unset.
fn default_solver_config(problem: ProblemKind, built: &BilevelProblem) -> SolverConfig {
    let mut cfg = SolverConfig::new(vec![0.0; built.dim_x()], vec![0.0; built.dim_y()]);
    match problem {
        ProblemKind::Example1 => {
            cfg.gamma = 10.0;
            cfg.eta = 0.1;
            cfg.eta_gamma = 0.25;
            cfg.eta_g = 0.25;
            cfg.outer_t = 2000;
            cfg.x0 = vec![2.0];
            cfg.y0 = vec![0.0];
        }
        ProblemKind::Example3 => {
            cfg.gamma = 15.0;
            cfg.eta = 0.01;
            cfg.eta_gamma = built.inner_defaults().penalized_step(cfg.gamma);
            cfg.eta_g = 0.25;
            cfg.outer_t = 2000;
            cfg.x0 = vec![1.0];
            cfg.y0 = vec![1.0];
        }
        ProblemKind::ToyPeft => {
            cfg.gamma = 15.0;
            cfg.eta = 0.01;
            cfg.eta_gamma = 0.01;
            cfg.eta_g = 0.01;
            cfg.outer_t = 5000;
            cfg.x0 = vec![1.0];
            cfg.y0 = vec![1.0];
        }
    }
    cfg
}

fn load_dataset(path: &Path) -> Result<ToyPeftSpec, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let mut sft = Vec::new();
    let mut dpo = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let parsed = parse_dataset_line(line).map_err(|e| {
            HarnessError::Config(format!("{}:{}: {e}", path.display(), idx + 1))
        })?;
        match parsed {
            Some(DatasetRecord::Sft(rec)) => sft.push(rec),
            Some(DatasetRecord::Dpo(rec)) => dpo.push(rec),
            None => {}
        }
    }
    let mut spec = ToyPeftSpec::table_defaults();
    spec.sft_dataset = sft;
    spec.dpo_dataset = dpo;
    Ok(spec)
}

/// Builds the toy-PEFT spec from options, loading the dataset file when one is
/// referenced (it must exist) and the built-in defaults otherwise.
pub fn toy_peft_spec(opts: &ToyPeftOptions) -> Result<ToyPeftSpec, HarnessError> {
    let mut spec = match &opts.dataset_file {
        Some(path) => {
            if !path.exists() {
                return Err(HarnessError::Config(format!(
                    "key `problem.dataset_file`: referenced file `{}` does not exist",
                    path.display()
                )));
            }
            load_dataset(path)?
        }
        None => ToyPeftSpec::table_defaults(),
    };
    if opts.include_extra_sft {
        spec.sft_dataset.push(ToyPeftSpec::extra_sft_record());
    }
    spec.beta = opts.beta;
    spec.reg_weight = opts.reg_weight;
    spec.ref_params = opts.ref_params;
    Ok(spec)
}

pub fn build_problem(
    problem: ProblemKind,
    opts: &ToyPeftOptions,
) -> Result<BilevelProblem, HarnessError> {
    match problem {
        ProblemKind::Example1 => Ok(make_example1()),
        ProblemKind::Example3 => Ok(make_example3()),
        ProblemKind::ToyPeft => Ok(make_toy_peft(&toy_peft_spec(opts)?)?),
    }
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, HarnessError> {
        let reader = Reader::new(raw);

        let problem = match reader.get("problem.name") {
            Some("example1") => ProblemKind::Example1,
            Some("example3") => ProblemKind::Example3,
            Some("toy_peft") => ProblemKind::ToyPeft,
            Some(other) => {
                return Err(HarnessError::Config(format!(
                    "key `problem.name` (line {}): unknown problem `{other}` (expected example1, example3, toy_peft)",
                    reader.line("problem.name")
                )))
            }
            None => {
                return Err(HarnessError::Config(
                    "missing required key `problem.name`".into(),
                ))
            }
        };

        let mut toy_peft = ToyPeftOptions::default();
        if let Some(path) = reader.get("problem.dataset_file") {
            toy_peft.dataset_file = Some(PathBuf::from(path));
        }
        if let Some(v) = reader.f64_opt("problem.beta")? {
            toy_peft.beta = v;
        }
        if let Some(v) = reader.f64_opt("problem.reg_weight")? {
            toy_peft.reg_weight = v;
        }
        if let Some(v) = reader.f64_opt("problem.ref_x")? {
            toy_peft.ref_params.0 = v;
        }
        if let Some(v) = reader.f64_opt("problem.ref_y")? {
            toy_peft.ref_params.1 = v;
        }
        if let Some(v) = reader.bool_opt("problem.include_extra_sft")? {
            toy_peft.include_extra_sft = v;
        }

        let solver = match reader.get("solver.name") {
            Some("pbgd_free") | None => SolverKind::PbgdFree,
            Some("f2sa_sl") => SolverKind::F2saSl,
            Some("pbgd_oracle") => SolverKind::PbgdOracle,
            Some(other) => {
                return Err(HarnessError::Config(format!(
                    "key `solver.name` (line {}): unknown solver `{other}` (expected pbgd_free, f2sa_sl, pbgd_oracle)",
                    reader.line("solver.name")
                )))
            }
        };

        let built = build_problem(problem, &toy_peft)?;
        let mut sc = default_solver_config(problem, &built);
        if let Some(v) = reader.f64_opt("solver.gamma")? {
            sc.gamma = v;
            if problem == ProblemKind::Example3 && !raw.contains("solver.eta_gamma") {
                sc.eta_gamma = built.inner_defaults().penalized_step(v);
            }
        }
        if let Some(v) = reader.f64_opt("solver.eta")? {
            sc.eta = v;
        }
        if let Some(v) = reader.f64_opt("solver.eta_gamma")? {
            sc.eta_gamma = v;
        }
        if let Some(v) = reader.f64_opt("solver.eta_g")? {
            sc.eta_g = v;
        }
        if let Some(v) = reader.usize_opt("solver.inner_k")? {
            sc.inner_k = v;
        }
        if let Some(v) = reader.usize_opt("solver.outer_t")? {
            sc.outer_t = v;
        }
        if let Some(v) = reader.vec_f64_opt("solver.x0")? {
            sc.x0 = v;
        }
        if let Some(v) = reader.vec_f64_opt("solver.y0")? {
            sc.y0 = v;
        }
        if let Some(v) = reader.bool_opt("solver.warm_start")? {
            sc.warm_start = v;
        }
        if let Some(v) = reader.usize_opt("solver.record_every")? {
            sc.record_every = v;
        }
        if let Some(v) = reader.f64_opt("solver.oracle_tol")? {
            sc.oracle_tol = v;
        }
        if let Some(v) = reader.bool_opt("solver.stale_y")? {
            sc.stale_y = v;
        }
        if let Some(v) = reader.f64_opt("solver.stop_update_tol")? {
            sc.stop_update_tol = Some(v);
        }

        let mut diagnostics = DiagnosticsConfig::default();
        if let Some(v) = reader.bool_opt("diagnostics.g_gap")? {
            diagnostics.g_gap = v;
        }
        if let Some(v) = reader.bool_opt("diagnostics.kkt")? {
            diagnostics.kkt = v;
        }
        let flat_c = reader.f64_opt("diagnostics.flatness.c")?;
        let flat_alpha = reader.f64_opt("diagnostics.flatness.alpha")?;
        diagnostics.flatness = match (flat_c, flat_alpha) {
            (Some(c), Some(alpha)) => Some(FlatnessOptions { c, alpha }),
            (None, None) => None,
            _ => {
                return Err(HarnessError::Config(
                    "keys `diagnostics.flatness.c` and `diagnostics.flatness.alpha` must be set together".into(),
                ))
            }
        };
        if let Some(grid) = reader.vec_f64_opt("diagnostics.gaps.gamma_grid")? {
            let l_f0 = reader.f64_opt("diagnostics.gaps.l_f0")?;
            let mu = reader.f64_opt("diagnostics.gaps.mu")?;
            let c = reader.f64_opt("diagnostics.gaps.c")?;
            let alpha = reader.f64_opt("diagnostics.gaps.alpha")?;
            let delta = reader.f64_opt("diagnostics.gaps.delta")?;
            match (l_f0, mu, c, alpha, delta) {
                (Some(l_f0), Some(mu), Some(c), Some(alpha), Some(delta)) => {
                    diagnostics.gaps = Some(GapsOptions {
                        gamma_grid: grid,
                        l_f0,
                        mu,
                        c,
                        alpha,
                        delta,
                    });
                }
                _ => {
                    return Err(HarnessError::Config(
                        "gap sweeps need all of `diagnostics.gaps.{l_f0,mu,c,alpha,delta}`".into(),
                    ))
                }
            }
        }

        let output_dir = PathBuf::from(reader.get("output.dir").unwrap_or("out"));

        reader.finish()?;

        Ok(Self {
            problem,
            toy_peft,
            solver,
            solver_config: sc,
            diagnostics,
            output_dir,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        Self::from_raw(&RawConfig::from_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_problem_defaults() {
        let raw = RawConfig::parse("problem.name = example1\nsolver.name = pbgd_free\n").unwrap();
        let cfg = ExperimentConfig::from_raw(&raw).unwrap();
        assert_eq!(cfg.problem, ProblemKind::Example1);
        assert_eq!(cfg.solver_config.gamma, 10.0);
        assert_eq!(cfg.solver_config.outer_t, 2000);
        assert_eq!(cfg.solver_config.x0, vec![2.0]);
    }

    #[test]
    fn malformed_number_names_the_key() {
        let raw =
            RawConfig::parse("problem.name = example1\nsolver.eta = fast\n").unwrap();
        let err = ExperimentConfig::from_raw(&raw).unwrap_err();
        assert!(err.to_string().contains("solver.eta"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let raw = RawConfig::parse("problem.name = example1\nsolver.etta = 0.1\n").unwrap();
        let err = ExperimentConfig::from_raw(&raw).unwrap_err();
        assert!(err.to_string().contains("solver.etta"), "{err}");
    }

    #[test]
    fn missing_equals_reports_line() {
        let err = RawConfig::parse("problem.name example1").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn comments_and_vectors_parse() {
        let raw = RawConfig::parse(
            "problem.name = example1 # the bias counterexample\nsolver.x0 = 1.5\nsolver.y0 = -0.25\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::from_raw(&raw).unwrap();
        assert_eq!(cfg.solver_config.x0, vec![1.5]);
        assert_eq!(cfg.solver_config.y0, vec![-0.25]);
    }

    #[test]
    fn referenced_dataset_file_must_exist() {
        let raw = RawConfig::parse(
            "problem.name = toy_peft\nproblem.dataset_file = /nonexistent/data.txt\n",
        )
        .unwrap();
        let err = ExperimentConfig::from_raw(&raw).unwrap_err();
        assert!(err.to_string().contains("does not exist"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }
}
