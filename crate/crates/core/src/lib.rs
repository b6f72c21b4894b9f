//! Value functions and optimal strategies for finite-horizon optimal switching
//! problems with `m` modes, solved three independent ways: finite differences on
//! the system of variational inequalities, iterated regression Snell envelopes
//! on simulated paths, and exact dynamic programming on a trinomial chain.

pub mod error;
pub mod fd_solver;
pub mod fixtures;
pub mod linalg;
pub mod model;
mod par;
pub mod picard_mc;
pub mod sde_sim;
pub mod strategy;
pub mod tree_oracle;
pub mod verify;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use model::{CoeffExpr, SwitchingProblem};
