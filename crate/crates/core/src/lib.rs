//! Global Lipschitz center manifolds for nonautonomous ODEs `v' = A(t)v + f(t,v)`
//! whose linear part admits a generalized trichotomy.
//!
//! The crate is organised bottom-up:
//!
//! * [`trichotomy`] evolution operators, invariant splittings and bound families,
//!   with sample-based certification of the structural axioms;
//! * [`families`] the concrete bound families (nonuniform `(a,b,c,d)`,
//!   `rho`-exponential, `mu`-polynomial), their Lipschitz budgets and the
//!   closed-form integral bound used for the polynomial case;
//! * [`hypotheses`] the quantities `sigma`, `omega`, the constants `M`, `N` and the
//!   contraction factor, assembled into a certificate;
//! * [`solver`] the discretised Lyapunov-Perron operator and its fixed-point iteration;
//! * [`lab`] the explicit four-dimensional example system, test perturbations, the
//!   perturbed flow and end-to-end validation;
//! * [`config`] and [`export`] the JSON/CSV surfaces used by the command line tool.
//!
//! Grid and sample evaluations go through [`exec::Execution`], which dispatches to
//! rayon when the `parallel` feature is enabled and runs sequentially otherwise.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod exec;
pub mod export;
pub mod families;
pub mod hypotheses;
pub mod interp;
pub mod lab;
pub mod norm;
mod nullable;
pub mod ode;
pub mod quadrature;
pub mod sampling;
pub mod scalar;
pub mod solver;
pub mod trichotomy;

pub use error::{Error, Result};
pub use exec::Execution;
pub use norm::NormSpec;
pub use scalar::ScalarFn;
