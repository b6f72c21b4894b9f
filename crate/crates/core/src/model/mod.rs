//! Problem instances: coefficient expressions, the switching problem itself,
//! and sampled checks of its standing assumptions.

pub mod expr;
pub mod problem;
pub mod validate;

pub use expr::{eval_expr, parse_expr, CoeffExpr, ExprError};
pub use problem::{DiffusionSpec, ProblemFile, SwitchingProblem};
pub use validate::{validate_problem, ValidationReport, Violation, ViolationKind};
