//! Two-layer softmax regression with closed-form derivatives, analytic
//! spectral bounds, and an (optionally sketched) Newton solver.
//!
//! The loss is `L(x) = 1/2 ||h(A2 softmax(A1 x)) - b||^2` plus the ridge
//! term `1/2 ||diag(w) A1 x||^2`.

pub mod activation;
pub mod bounds;
pub mod derivatives;
pub mod error;
pub mod harness;
pub mod hessian;
pub mod linalg;
pub mod model;
pub mod newton;
pub mod oracle;
pub mod sketch;

pub use activation::{Activation, ActivationKind};
pub use error::{Error, Result};
pub use model::{eval_forward, ModelState, ProblemInstance};
