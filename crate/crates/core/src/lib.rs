//! Stochastic model of interdependent firm growth.
//!
//! Firms trade with each other at constant rates; income and expenditure are
//! driven by square-root (Poisson-limit) noise. The crate covers:
//!
//! - [`model`]: parameters, drift matrix and diffusion tensor,
//! - [`moments`]: exact and RK4 moment dynamics of every order,
//! - [`sim`]: Euler–Maruyama ensembles with reproducible per-path streams,
//! - [`risk`]: value at risk, conditional value at risk and relative risk,
//! - [`inference`]: Gaussian snapshot likelihood and Nelder–Mead MLE,
//! - [`calibration`]: trade rates and initial conditions from input-output tables.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod error;
pub mod expm;
pub mod inference;
pub mod model;
pub mod moments;
pub mod optim;
pub mod risk;
pub mod sim;

pub use error::{Error, Result};
pub use model::{
    build_diffusion_tensor, build_drift_matrix, validate_params, DiffusionTensor, DriftMatrix, ModelParams,
    NetWorthVector, ParamsDocument, ValidationReport,
};
pub use moments::{MomentState, MomentSystem};
pub use risk::{QuantileSpec, RiskCurve, RiskPoint};
pub use sim::{PathEnsemble, SimConfig};

pub use nalgebra::{DMatrix, DVector};
