//! Built-in bilevel problems and the problem interface.
//!
//! A [`BilevelProblem`] exposes evaluations and hand-derived gradients of the
//! upper-level objective `f(x, y)` and lower-level objective `g(x, y)`, plus
//! optional closed forms for problems where the lower-level minimizers are
//! known analytically. Problems are immutable after construction and safe to
//! share across concurrent solver runs.

use std::sync::Arc;

use thiserror::Error;

use crate::numerics::{log_sigmoid, stable_softmax};

pub type EvalFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;
pub type GradFn = dyn Fn(&[f64], &[f64]) -> (Vec<f64>, Vec<f64>) + Send + Sync;
pub type YOfX = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;
pub type YOfXGamma = dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("{which} dataset is empty")]
    EmptyDataset { which: &'static str },
    #[error("{which} record {index} has {len} features, expected 4")]
    BadFeatureLength {
        which: &'static str,
        index: usize,
        len: usize,
    },
    #[error("sft record {index} has label {label}, expected 0 or 1")]
    BadLabel { index: usize, label: i64 },
    #[error("beta must be strictly positive, got {0}")]
    BadBeta(f64),
    #[error("reg_weight must be non-negative, got {0}")]
    BadRegWeight(f64),
    #[error("cannot parse dataset record: {0}")]
    DatasetParse(String),
}

/// Known closed forms, present only where they are exact.
#[derive(Clone)]
pub struct ClosedForm {
    /// `y*_g(x)`, a global lower-level minimizer of `g(x, .)`.
    pub y_g_star: Option<Arc<YOfX>>,
    /// `y*_gamma(x)`, a global minimizer of `f/gamma + g` in `y`.
    pub y_gamma_star: Option<Arc<YOfXGamma>>,
    /// The full penalty gradient `grad F_gamma(x)`.
    pub grad_f_gamma: Option<Arc<YOfXGamma>>,
}

/// Step-size defaults for inner gradient-descent solves, derived from
/// per-problem smoothness constants in `y`.
#[derive(Debug, Clone, Copy)]
pub struct InnerSolveDefaults {
    /// Step for minimizing `g(x, .)`.
    pub g_step: f64,
    /// Smoothness constant of `f(x, .)` in `y`.
    pub smooth_f_y: f64,
    /// Smoothness constant of `g(x, .)` in `y`.
    pub smooth_g_y: f64,
}

impl InnerSolveDefaults {
    /// Step for minimizing `f/gamma + g` in `y`: `1 / (l_g1 + l_f1 / gamma)`.
    pub fn penalized_step(&self, gamma: f64) -> f64 {
        1.0 / (self.smooth_g_y + self.smooth_f_y / gamma)
    }
}

/// A bilevel problem `min f(x,y) s.t. y in argmin_y g(x,y)` with analytic
/// gradients. All evaluation operations are pure functions of their inputs.
#[derive(Clone)]
pub struct BilevelProblem {
    name: &'static str,
    dim_x: usize,
    dim_y: usize,
    f: Arc<EvalFn>,
    g: Arc<EvalFn>,
    grad_f: Arc<GradFn>,
    grad_g: Arc<GradFn>,
    closed_form: Option<ClosedForm>,
    inner: InnerSolveDefaults,
}

impl BilevelProblem {
    /// Assembles a problem from raw evaluation and gradient closures.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        name: &'static str,
        dim_x: usize,
        dim_y: usize,
        f: Arc<EvalFn>,
        g: Arc<EvalFn>,
        grad_f: Arc<GradFn>,
        grad_g: Arc<GradFn>,
        closed_form: Option<ClosedForm>,
        inner: InnerSolveDefaults,
    ) -> Self {
        Self {
            name,
            dim_x,
            dim_y,
            f,
            g,
            grad_f,
            grad_g,
            closed_form,
            inner,
        }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }
    pub fn dim_x(&self) -> usize {
        self.dim_x
    }
    pub fn dim_y(&self) -> usize {
        self.dim_y
    }

    pub fn eval_f(&self, x: &[f64], y: &[f64]) -> f64 {
        (self.f)(x, y)
    }
    pub fn eval_g(&self, x: &[f64], y: &[f64]) -> f64 {
        (self.g)(x, y)
    }

    /// Returns `(grad_x f, grad_y f)`.
    pub fn grad_f(&self, x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (self.grad_f)(x, y)
    }

    /// Returns `(grad_x g, grad_y g)`.
    pub fn grad_g(&self, x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (self.grad_g)(x, y)
    }

    pub fn closed_form(&self) -> Option<&ClosedForm> {
        self.closed_form.as_ref()
    }

    pub fn inner_defaults(&self) -> InnerSolveDefaults {
        self.inner
    }
}

impl std::fmt::Debug for BilevelProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BilevelProblem")
            .field("name", &self.name)
            .field("dim_x", &self.dim_x)
            .field("dim_y", &self.dim_y)
            .finish_non_exhaustive()
    }
}

/// `f(x,y) = x^2 + 10 y`, `g(x,y) = (y - x + 1)^2`.
///
/// The penalty gradient is `2x + 10` (limit `x = -5`) while the
/// value-function-free direction is `2x` (limit `x = 0`), so the two update
/// rules drive `x` to opposite stationary points.
pub fn make_example1() -> BilevelProblem {
    BilevelProblem {
        name: "example1",
        dim_x: 1,
        dim_y: 1,
        f: Arc::new(|x, y| x[0] * x[0] + 10.0 * y[0]),
        g: Arc::new(|x, y| {
            let r = y[0] - x[0] + 1.0;
            r * r
        }),
        grad_f: Arc::new(|x, _y| (vec![2.0 * x[0]], vec![10.0])),
        grad_g: Arc::new(|x, y| {
            let r = y[0] - x[0] + 1.0;
            (vec![-2.0 * r], vec![2.0 * r])
        }),
        closed_form: Some(ClosedForm {
            y_g_star: Some(Arc::new(|x| vec![x[0] - 1.0])),
            y_gamma_star: Some(Arc::new(|x, gamma| vec![x[0] - 1.0 - 5.0 / gamma])),
            grad_f_gamma: Some(Arc::new(|x, _gamma| vec![2.0 * x[0] + 10.0])),
        }),
        inner: InnerSolveDefaults {
            g_step: 0.25,
            smooth_f_y: 0.0,
            smooth_g_y: 2.0,
        },
    }
}

/// Width parameter of the Gaussian window in [`make_example3`].
const EX3_GAUSS_DENOM: f64 = 2.0 * 0.005 * 0.005;

/// Measured bound on `|d^2 f / dy^2|` for the example-3 upper objective; the
/// oscillatory term dominates with curvature just under 2.9e5.
const EX3_SMOOTH_F_Y: f64 = 2.9e5;

fn example3_f(u: f64) -> f64 {
    (u.sin() + 2.0) * u * u + 10.0 * (-u * u / EX3_GAUSS_DENOM).exp() * (100.0 * u).sin()
}

fn example3_df_du(u: f64) -> f64 {
    let gauss = (-u * u / EX3_GAUSS_DENOM).exp();
    u * u * u.cos()
        + 2.0 * u * (u.sin() + 2.0)
        + 10.0 * gauss * (100.0 * (100.0 * u).cos() - (2.0 * u / EX3_GAUSS_DENOM) * (100.0 * u).sin())
}

/// `f(x,y) = (sin(y-x) + 2)|y-x|^2 + 10 exp(-(y-x)^2 / (2 * 0.005^2)) sin(100(y-x))`,
/// `g(x,y) = (y - x)^2`.
///
/// `g` is strongly convex with `y*_g(x) = x`, while `f` carries a steep
/// Gaussian-windowed oscillation around the lower-level solution, so
/// `df/dy = 1000` at `y = y*_g(x)` even though `f` is tame at unit scale.
pub fn make_example3() -> BilevelProblem {
    BilevelProblem {
        name: "example3",
        dim_x: 1,
        dim_y: 1,
        f: Arc::new(|x, y| example3_f(y[0] - x[0])),
        g: Arc::new(|x, y| {
            let u = y[0] - x[0];
            u * u
        }),
        grad_f: Arc::new(|x, y| {
            let d = example3_df_du(y[0] - x[0]);
            (vec![-d], vec![d])
        }),
        grad_g: Arc::new(|x, y| {
            let u = y[0] - x[0];
            (vec![-2.0 * u], vec![2.0 * u])
        }),
        closed_form: Some(ClosedForm {
            y_g_star: Some(Arc::new(|x| vec![x[0]])),
            y_gamma_star: None,
            grad_f_gamma: None,
        }),
        inner: InnerSolveDefaults {
            g_step: 0.25,
            smooth_f_y: EX3_SMOOTH_F_Y,
            smooth_g_y: 2.0,
        },
    }
}

/// One supervised record: feature vector of length 4 and a class label in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct SftRecord {
    pub features: Vec<f64>,
    pub label: u8,
}

/// One preference pair: per-response feature rows for the preferred response
/// (class label 1) and the rejected response (class label 0).
#[derive(Debug, Clone, PartialEq)]
pub struct DpoRecord {
    pub preferred: Vec<f64>,
    pub rejected: Vec<f64>,
}

/// A record parsed from the toy-PEFT dataset text format.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetRecord {
    Sft(SftRecord),
    Dpo(DpoRecord),
}

/// Parses one line of the dataset format:
/// `sft,<f1>,<f2>,<f3>,<f4>,<label>` or `dpo,<w1>,<w2>,<w3>,<w4>,<l1>,<l2>,<l3>,<l4>`.
/// Blank lines and lines starting with `#` yield `None`.
pub fn parse_dataset_line(line: &str) -> Result<Option<DatasetRecord>, ProblemError> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    let parse_f64 = |s: &str| -> Result<f64, ProblemError> {
        s.parse::<f64>()
            .map_err(|_| ProblemError::DatasetParse(format!("bad number `{s}` in `{line}`")))
    };
    match fields[0] {
        "sft" => {
            if fields.len() != 6 {
                return Err(ProblemError::DatasetParse(format!(
                    "sft record needs 6 fields, got {} in `{line}`",
                    fields.len()
                )));
            }
            let features = fields[1..5]
                .iter()
                .map(|s| parse_f64(s))
                .collect::<Result<Vec<_>, _>>()?;
            let label = match fields[5] {
                "0" => 0u8,
                "1" => 1u8,
                other => {
                    return Err(ProblemError::DatasetParse(format!(
                        "bad label `{other}` in `{line}`"
                    )))
                }
            };
            Ok(Some(DatasetRecord::Sft(SftRecord { features, label })))
        }
        "dpo" => {
            if fields.len() != 9 {
                return Err(ProblemError::DatasetParse(format!(
                    "dpo record needs 9 fields, got {} in `{line}`",
                    fields.len()
                )));
            }
            let nums = fields[1..9]
                .iter()
                .map(|s| parse_f64(s))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Some(DatasetRecord::Dpo(DpoRecord {
                preferred: nums[0..4].to_vec(),
                rejected: nums[4..8].to_vec(),
            })))
        }
        other => Err(ProblemError::DatasetParse(format!(
            "unknown record tag `{other}` in `{line}`"
        ))),
    }
}

/// Specification of the toy parameter-efficient fine-tuning problem: a
/// two-weight convolution-softmax classifier with a DPO upper objective and a
/// supervised NLL lower objective.
#[derive(Debug, Clone)]
pub struct ToyPeftSpec {
    pub sft_dataset: Vec<SftRecord>,
    pub dpo_dataset: Vec<DpoRecord>,
    /// DPO temperature.
    pub beta: f64,
    /// l2 regularization weight applied to both objectives.
    pub reg_weight: f64,
    /// Reference-policy parameters `(x_ref, y_ref)`.
    pub ref_params: (f64, f64),
}

impl ToyPeftSpec {
    /// The default datasets and constants: one supervised pair, one preference
    /// pair, `beta = 1`, regularization weight `0.01`, reference parameters
    /// `(-5.34, -9.94)`.
    pub fn table_defaults() -> Self {
        Self {
            sft_dataset: vec![SftRecord {
                features: vec![1.0, 1.0, 0.5, 0.5],
                label: 0,
            }],
            dpo_dataset: vec![DpoRecord {
                preferred: vec![1.0, 0.5, 0.5, 0.5],
                rejected: vec![0.5, 1.0, 1.0, 1.0],
            }],
            beta: 1.0,
            reg_weight: 0.01,
            ref_params: (-5.34, -9.94),
        }
    }

    /// The second supervised row of the reference dataset (label 1). It has no
    /// stated role in the default supervised set; opt in via configuration.
    pub fn extra_sft_record() -> SftRecord {
        SftRecord {
            features: vec![1.0, 0.5, 0.0, 0.5],
            label: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        if self.sft_dataset.is_empty() {
            return Err(ProblemError::EmptyDataset { which: "sft" });
        }
        if self.dpo_dataset.is_empty() {
            return Err(ProblemError::EmptyDataset { which: "dpo" });
        }
        for (i, rec) in self.sft_dataset.iter().enumerate() {
            if rec.features.len() != 4 {
                return Err(ProblemError::BadFeatureLength {
                    which: "sft",
                    index: i,
                    len: rec.features.len(),
                });
            }
            if rec.label > 1 {
                return Err(ProblemError::BadLabel {
                    index: i,
                    label: rec.label as i64,
                });
            }
        }
        for (i, rec) in self.dpo_dataset.iter().enumerate() {
            for feats in [&rec.preferred, &rec.rejected] {
                if feats.len() != 4 {
                    return Err(ProblemError::BadFeatureLength {
                        which: "dpo",
                        index: i,
                        len: feats.len(),
                    });
                }
            }
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(ProblemError::BadBeta(self.beta));
        }
        if self.reg_weight < 0.0 {
            return Err(ProblemError::BadRegWeight(self.reg_weight));
        }
        Ok(())
    }
}

impl Default for ToyPeftSpec {
    fn default() -> Self {
        Self::table_defaults()
    }
}

/// Forward pass of the two-weight model: one convolution of kernel length 2
/// and stride 2 over a length-4 feature vector produces two class logits,
/// softmaxed into `(p0, p1)`.
pub fn conv_softmax_forward(theta: (f64, f64), features: &[f64]) -> (f64, f64) {
    assert_eq!(features.len(), 4, "feature vector must have length 4");
    let (w0, w1) = theta;
    let l0 = w0 * features[0] + w1 * features[1];
    let l1 = w0 * features[2] + w1 * features[3];
    let p = stable_softmax(&[l0, l1]);
    (p[0], p[1])
}

fn log_prob(theta: (f64, f64), features: &[f64], label: u8) -> f64 {
    let (w0, w1) = theta;
    let l0 = w0 * features[0] + w1 * features[1];
    let l1 = w0 * features[2] + w1 * features[3];
    let m = l0.max(l1);
    let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
    let picked = if label == 0 { l0 } else { l1 };
    picked - lse
}

/// Gradient of `log pi(label | features)` in `(w0, w1)` via the softmax chain
/// rule: `grad L_label - sum_k p_k grad L_k`.
fn grad_log_prob(theta: (f64, f64), features: &[f64], label: u8) -> (f64, f64) {
    let (p0, p1) = conv_softmax_forward(theta, features);
    if label == 0 {
        (
            p1 * (features[0] - features[2]),
            p1 * (features[1] - features[3]),
        )
    } else {
        (
            p0 * (features[2] - features[0]),
            p0 * (features[3] - features[1]),
        )
    }
}

fn sigmoid(z: f64) -> f64 {
    log_sigmoid(z).exp()
}

/// Builds the toy PEFT problem from `spec`. The two convolution weights are
/// the optimization variables: `x = w0` (upper level) and `y = w1` (lower
/// level). The upper objective is the mean DPO loss over the preference pairs
/// plus `reg_weight * |theta|^2`; the lower objective is the mean supervised
/// negative log-likelihood plus the same regularizer.
pub fn make_toy_peft(spec: &ToyPeftSpec) -> Result<BilevelProblem, ProblemError> {
    spec.validate()?;
    let spec = spec.clone();
    let reg = spec.reg_weight;
    let beta = spec.beta;
    let ref_params = spec.ref_params;

    // y-smoothness bounds from the dataset geometry; softmax curvature <= 1/4.
    let smooth_g_y = spec
        .sft_dataset
        .iter()
        .map(|r| 0.25 * (r.features[1] - r.features[3]).powi(2))
        .sum::<f64>()
        / spec.sft_dataset.len() as f64
        + 2.0 * reg;
    let smooth_f_y = spec
        .dpo_dataset
        .iter()
        .map(|r| {
            let qw = (r.preferred[3] - r.preferred[1]).abs() + (r.rejected[1] - r.rejected[3]).abs();
            let q_slope = beta * qw;
            let q_curv = beta
                * 0.25
                * ((r.preferred[3] - r.preferred[1]).powi(2)
                    + (r.rejected[1] - r.rejected[3]).powi(2));
            0.25 * q_slope * q_slope + q_curv
        })
        .sum::<f64>()
        / spec.dpo_dataset.len() as f64
        + 2.0 * reg;
    let g_step = if smooth_g_y > 0.0 {
        1.0 / (2.0 * smooth_g_y)
    } else {
        1.0
    };

    let dpo_q = move |theta: (f64, f64), pair: &DpoRecord| -> f64 {
        let policy = log_prob(theta, &pair.preferred, 1) - log_prob(theta, &pair.rejected, 0);
        let reference =
            log_prob(ref_params, &pair.preferred, 1) - log_prob(ref_params, &pair.rejected, 0);
        beta * (policy - reference)
    };

    let f = {
        let spec = spec.clone();
        Arc::new(move |x: &[f64], y: &[f64]| {
            let theta = (x[0], y[0]);
            let mean_loss = spec
                .dpo_dataset
                .iter()
                .map(|pair| -log_sigmoid(dpo_q(theta, pair)))
                .sum::<f64>()
                / spec.dpo_dataset.len() as f64;
            mean_loss + reg * (theta.0 * theta.0 + theta.1 * theta.1)
        }) as Arc<EvalFn>
    };

    let grad_f = {
        let spec = spec.clone();
        Arc::new(move |x: &[f64], y: &[f64]| {
            let theta = (x[0], y[0]);
            let mut gx = 0.0;
            let mut gy = 0.0;
            for pair in &spec.dpo_dataset {
                let q = dpo_q(theta, pair);
                let weight = 1.0 - sigmoid(q);
                let (pw0, pw1) = grad_log_prob(theta, &pair.preferred, 1);
                let (pl0, pl1) = grad_log_prob(theta, &pair.rejected, 0);
                // grad of -log sigmoid(q) = -(1 - sigmoid(q)) grad q
                gx += -weight * beta * (pw0 - pl0);
                gy += -weight * beta * (pw1 - pl1);
            }
            let n = spec.dpo_dataset.len() as f64;
            (
                vec![gx / n + 2.0 * reg * theta.0],
                vec![gy / n + 2.0 * reg * theta.1],
            )
        }) as Arc<GradFn>
    };

    let g = {
        let spec = spec.clone();
        Arc::new(move |x: &[f64], y: &[f64]| {
            let theta = (x[0], y[0]);
            let mean_nll = spec
                .sft_dataset
                .iter()
                .map(|rec| -log_prob(theta, &rec.features, rec.label))
                .sum::<f64>()
                / spec.sft_dataset.len() as f64;
            mean_nll + reg * (theta.0 * theta.0 + theta.1 * theta.1)
        }) as Arc<EvalFn>
    };

    let grad_g = {
        let spec = spec.clone();
        Arc::new(move |x: &[f64], y: &[f64]| {
            let theta = (x[0], y[0]);
            let mut gx = 0.0;
            let mut gy = 0.0;
            for rec in &spec.sft_dataset {
                let (d0, d1) = grad_log_prob(theta, &rec.features, rec.label);
                gx -= d0;
                gy -= d1;
            }
            let n = spec.sft_dataset.len() as f64;
            (
                vec![gx / n + 2.0 * reg * theta.0],
                vec![gy / n + 2.0 * reg * theta.1],
            )
        }) as Arc<GradFn>
    };

    Ok(BilevelProblem {
        name: "toy_peft",
        dim_x: 1,
        dim_y: 1,
        f,
        g,
        grad_f,
        grad_g,
        closed_form: None,
        inner: InnerSolveDefaults {
            g_step,
            smooth_f_y,
            smooth_g_y,
        },
    })
}
