//! Physics-informed neural networks for direct and inverse Stefan
//! free-boundary problems.
//!
//! The crate trains a solution network and a moving-boundary network jointly
//! against composite physics losses (PDE residual, initial/boundary misfits,
//! interface conditions, sparse data) for a family of heat-transfer
//! benchmarks with closed-form solutions, and reports relative L2 errors
//! for both the temperature field and the free boundary.

pub mod autodiff;
pub mod engine;
pub mod network;
pub mod optim;

pub use autodiff::{Binding, EvalError, Expr, ExprError, ExprKind, VarId};
pub use network::{Mlp, NetworkError};
pub use optim::{adaptive_lambda, project_positive, AdamState, LossWeights, OptimError};
