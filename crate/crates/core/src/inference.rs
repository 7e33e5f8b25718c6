//! Gaussian log-likelihood of net-worth snapshots and maximum-likelihood
//! estimation of selected parameters.
//!
//! Each snapshot is scored against the mean and covariance propagated from
//! the known initial condition; snapshots are not conditioned on each other.

use std::f64::consts::PI;
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, NetWorthVector};
use crate::moments::moment_trajectory;
use crate::optim::{nelder_mead, NelderMeadOptions};

/// Snapshots `(t_d, a_d)` of all firms, plus the known initial condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub a0: NetWorthVector,
    records: Vec<(f64, DVector<f64>)>,
}

impl ObservationSet {
    pub fn new(a0: NetWorthVector, records: Vec<(f64, DVector<f64>)>) -> Result<Self> {
        let n = a0.len();
        a0.check_initial(n)?;
        let mut prev = 0.0;
        for (d, (t, a)) in records.iter().enumerate() {
            if !(*t > prev) || !t.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "observation {d}: times must be positive and strictly ascending (t = {t})"
                )));
            }
            prev = *t;
            if a.len() != n {
                return Err(Error::Dimension(format!(
                    "observation {d} has {} values, expected {n}",
                    a.len()
                )));
            }
            if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "observation {d} has a negative or non-finite value"
                )));
            }
        }
        Ok(Self { a0, records })
    }

    pub fn records(&self) -> &[(f64, DVector<f64>)] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Reads `t,a_1..a_N`.
    pub fn read_csv<R: Read>(input: R, a0: NetWorthVector) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let headers = reader.headers()?.clone();
        let n = a0.len();
        let expected: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=n).map(|i| format!("a_{i}")))
            .collect();
        let got: Vec<&str> = headers.iter().map(str::trim).collect();
        if got != expected {
            return Err(Error::Parse(format!(
                "observation header must be `{}`, got `{}`",
                expected.join(","),
                got.join(",")
            )));
        }
        let mut records = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = row + 2;
            let values = rec
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("line {line}: bad number `{f}`: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            records.push((values[0], DVector::from_column_slice(&values[1..])));
        }
        Self::new(a0, records)
    }
}

/// Log-density of `N(mean, cov)` at `x`, after adding `1e-9 * trace / N`
/// to the diagonal.
pub fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let n = x.len();
    let jitter = 1e-9 * cov.trace() / n as f64;
    let mut c = cov.clone();
    for i in 0..n {
        c[(i, i)] += jitter;
    }
    let chol = c
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("covariance has no Cholesky factor".into()))?;
    let r = x - mean;
    let z = chol
        .l()
        .solve_lower_triangular(&r)
        .expect("Cholesky factor is nonsingular");
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (n as f64 * (2.0 * PI).ln() + log_det + z.norm_squared()))
}

/// Per-observation log-densities, in record order.
pub fn observation_log_densities(params: &ModelParams, obs: &ObservationSet) -> Result<Vec<f64>> {
    let grid: Vec<f64> = std::iter::once(0.0)
        .chain(obs.records.iter().map(|(t, _)| *t))
        .collect();
    let states = moment_trajectory(params, &obs.a0, &grid)?;
    obs.records
        .iter()
        .zip(states.iter().skip(1))
        .enumerate()
        .map(|(d, ((t, a), s))| {
            gaussian_log_density(a, &s.mu1, &s.mu2).map_err(|e| match e {
                Error::NotPositiveDefinite(_) => {
                    Error::NotPositiveDefinite(format!("observation {d} at t = {t}"))
                }
                other => other,
            })
        })
        .collect()
}

/// Sum of Gaussian log-densities of every snapshot.
pub fn log_likelihood(params: &ModelParams, obs: &ObservationSet) -> Result<f64> {
    Ok(observation_log_densities(params, obs)?.iter().sum())
}

/// Which parameters to estimate, where to start, and optimizer settings.
/// Free parameters are searched on a log scale, so they must start positive.
#[derive(Debug, Clone)]
pub struct FitSpec {
    pub init: ModelParams,
    pub free_phi: DMatrix<bool>,
    pub free_lambda: Vec<bool>,
    pub max_iter: usize,
    pub tolerance: f64,
}

impl FitSpec {
    pub fn new(init: ModelParams) -> Self {
        let n = init.n;
        Self {
            init,
            free_phi: DMatrix::from_element(n, n, false),
            free_lambda: vec![false; n],
            max_iter: 2000,
            tolerance: 1e-8,
        }
    }

    pub fn free_all_lambda(mut self) -> Self {
        self.free_lambda = vec![true; self.init.n];
        self
    }

    /// Frees the `phi` entries that are positive in the initial guess;
    /// structural zeros stay fixed.
    pub fn free_positive_phi(mut self) -> Self {
        let phi = &self.init.phi;
        self.free_phi = DMatrix::from_fn(phi.nrows(), phi.ncols(), |i, j| phi[(i, j)] > 0.0);
        self
    }

    fn free_slots(&self) -> Vec<Slot> {
        let n = self.init.n;
        let mut slots = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if self.free_phi[(i, j)] {
                    slots.push(Slot::Phi(i, j));
                }
            }
        }
        slots.extend((0..n).filter(|&i| self.free_lambda[i]).map(Slot::Lambda));
        slots
    }

    pub fn validate(&self) -> Result<()> {
        self.init.ensure_valid()?;
        let n = self.init.n;
        if self.free_phi.shape() != (n, n) || self.free_lambda.len() != n {
            return Err(Error::Dimension(
                "free masks must match the parameter shapes".into(),
            ));
        }
        let slots = self.free_slots();
        if slots.is_empty() {
            return Err(Error::InvalidArgument(
                "fit needs at least one free parameter".into(),
            ));
        }
        for s in &slots {
            if !(s.get(&self.init) > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "free parameter {s:?} must start positive (searched on a log scale)"
                )));
            }
        }
        if self.max_iter == 0 || !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument(
                "max_iter and tolerance must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Phi(usize, usize),
    Lambda(usize),
}

impl Slot {
    fn get(&self, p: &ModelParams) -> f64 {
        match *self {
            Slot::Phi(i, j) => p.phi[(i, j)],
            Slot::Lambda(i) => p.lambda[i],
        }
    }

    fn set(&self, p: &mut ModelParams, v: f64) {
        match *self {
            Slot::Phi(i, j) => p.phi[(i, j)] = v,
            Slot::Lambda(i) => p.lambda[i] = v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub report: FitReport,
}

/// Maximizes the log-likelihood over the free parameters with Nelder–Mead
/// on their logarithms. A run that hits `max_iter` returns its best point
/// with `converged = false`.
pub fn fit_mle(spec: &FitSpec, obs: &ObservationSet) -> Result<FitResult> {
    spec.validate()?;
    if obs.a0.len() != spec.init.n {
        return Err(Error::Dimension(
            "observations and parameters disagree on N".into(),
        ));
    }
    let slots = spec.free_slots();
    let apply = |theta: &[f64]| {
        let mut p = spec.init.clone();
        for (s, v) in slots.iter().zip(theta) {
            s.set(&mut p, v.exp());
        }
        p
    };
    let x0: Vec<f64> = slots.iter().map(|s| s.get(&spec.init).ln()).collect();
    let opts = NelderMeadOptions {
        max_iter: spec.max_iter,
        xtol: spec.tolerance,
        ftol: spec.tolerance,
        ..Default::default()
    };
    let best = nelder_mead(
        |theta| match log_likelihood(&apply(theta), obs) {
            Ok(l) => -l,
            Err(_) => f64::INFINITY,
        },
        &x0,
        &opts,
    );
    let params = apply(&best.x);
    let log_likelihood = log_likelihood(&params, obs)?;
    Ok(FitResult {
        params,
        report: FitReport {
            log_likelihood,
            iterations: best.iterations,
            converged: best.converged,
        },
    })
}
