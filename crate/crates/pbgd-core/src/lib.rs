//! Penalty-based bilevel optimization in pure Rust.
//!
//! The crate solves problems of the form
//!
//! ```text
//! min_{x,y} f(x, y)   s.t.   y in argmin_z g(x, z)
//! ```
//!
//! through the penalty surrogate `F_gamma(x) = min_y f(x,y) + gamma (g(x,y) - min_z g(x,z))`.
//! Three first-order solvers are provided:
//!
//! - [`solvers::pbgd_free_run`] — the value-function-free single-loop scheme that
//!   steps `x` along `grad_x f(x, y^gamma)` only,
//! - [`solvers::f2sa_sl_run`] — the fully-single-loop F²SA scheme tracking both
//!   lower-level sequences and stepping along the full penalty gradient,
//! - [`solvers::pbgd_oracle_run`] — a double-loop reference that solves both
//!   lower-level problems to tolerance each outer step.
//!
//! [`problems`] ships three built-in analytic problems with hand-derived
//! gradients, and [`diagnostics`] measures everything the analysis cares about:
//! the pointwise flatness constant `delta(x)`, the penalty approximation gaps
//! and their bounds, the omitted-bias decomposition, and KKT residuals.

pub mod diagnostics;
pub mod numerics;
pub mod problems;
pub mod solvers;

pub use problems::{BilevelProblem, ToyPeftSpec};
pub use solvers::{IterateRecord, SolverConfig};
