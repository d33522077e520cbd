//! Differentiable numeric substrate: arrays with reverse-mode gradients,
//! ELU MLPs and GRU cells, Gaussian and tanh-Gaussian distributions, Adam,
//! a finite-difference gradient checker and a checkpoint container.
//!
//! All arithmetic is `f64`.

pub mod array;
pub mod checkpoint;
pub mod dist;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;

pub use array::Array;
pub use dist::{kl_diag_gaussian, kl_var, DiagGaussian, GaussianVar, TanhGaussian, STD_FLOOR, TANH_EPS};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use nn::{gru_step, mlp_forward, Dense, GruParams, GruVars, MlpParams, MlpVars};
pub use optim::{Adam, AdamConfig};
pub use params::{collect_grads, param_hash, Module, Parameters, VarSet};
pub use tape::{Gradients, Tape, Var};
