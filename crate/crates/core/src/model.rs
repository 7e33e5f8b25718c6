//! Model parameters and the Fokker–Planck coefficients derived from them.
//!
//! Firm `i` earns income at rate `phi[i][j] * a_j` from each firm `j` and
//! spends at rate `lambda[i] * a_i`. Both flows are linear in the state, so
//! the drift is a matrix and the diffusion is a rank-three tensor contracted
//! against the state:
//!
//! ```text
//! A_i(a)  = sum_j (phi_ij - lambda_i delta_ij) a_j
//! B_ij(a) = sum_k { (phi_ik + lambda_i delta_ik) delta_ij
//!                   + sqrt(phi_ik phi_jk) (1 - delta_ij) } a_k
//! ```

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationProvenance;
use crate::error::{Error, Result};
use crate::inference::FitReport;

/// Trade-rate matrix `phi` (1/time) and expenditure rates `lambda` (1/time).
///
/// Fields are public so that unchecked data (e.g. freshly parsed JSON) can be
/// held and reported on; every operation that consumes parameters calls
/// [`ModelParams::ensure_valid`] first.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub n: usize,
    pub phi: DMatrix<f64>,
    pub lambda: DVector<f64>,
}

impl ModelParams {
    /// Builds validated parameters.
    pub fn new(phi: DMatrix<f64>, lambda: DVector<f64>) -> Result<Self> {
        let params = Self {
            n: lambda.len(),
            phi,
            lambda,
        };
        params.ensure_valid()?;
        Ok(params)
    }

    /// Row-major convenience constructor.
    pub fn from_rows(phi: &[Vec<f64>], lambda: &[f64]) -> Result<Self> {
        let n = lambda.len();
        if phi.len() != n || phi.iter().any(|row| row.len() != n) {
            return Err(Error::Dimension(format!(
                "phi must be {n}x{n} to match lambda of length {n}"
            )));
        }
        let phi = DMatrix::from_fn(n, n, |i, j| phi[i][j]);
        Self::new(phi, DVector::from_column_slice(lambda))
    }

    /// Parameters with no trade at all; useful as a starting point.
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            phi: DMatrix::zeros(n, n),
            lambda: DVector::zeros(n),
        }
    }

    pub fn validate(&self) -> ValidationReport {
        validate_params(self)
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        if report.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidParams(report.violations))
        }
    }
}

/// Violations found by [`validate_params`]; empty iff the parameters are valid.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        write!(f, "{}", self.violations.join("; "))
    }
}

/// Lists shape mismatches, non-finite entries and negative entries.
pub fn validate_params(params: &ModelParams) -> ValidationReport {
    let mut violations = Vec::new();
    let n = params.n;
    if n == 0 {
        violations.push("n must be positive".to_string());
    }
    if params.phi.nrows() != n || params.phi.ncols() != n {
        violations.push(format!(
            "phi is {}x{}, expected {n}x{n}",
            params.phi.nrows(),
            params.phi.ncols()
        ));
    }
    if params.lambda.len() != n {
        violations.push(format!("lambda has length {}, expected {n}", params.lambda.len()));
    }
    for i in 0..params.phi.nrows() {
        for j in 0..params.phi.ncols() {
            let v = params.phi[(i, j)];
            if !v.is_finite() {
                violations.push(format!("non-finite phi[{i}][{j}]"));
            } else if v < 0.0 {
                violations.push(format!("negative phi[{i}][{j}]"));
            }
        }
    }
    for (i, &v) in params.lambda.iter().enumerate() {
        if !v.is_finite() {
            violations.push(format!("non-finite lambda[{i}]"));
        } else if v < 0.0 {
            violations.push(format!("negative lambda[{i}]"));
        }
    }
    ValidationReport { violations }
}

/// Drift generator `phi - diag(lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftMatrix(pub DMatrix<f64>);

impl DriftMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

pub fn build_drift_matrix(params: &ModelParams) -> Result<DriftMatrix> {
    params.ensure_valid()?;
    let mut a = params.phi.clone();
    for i in 0..params.n {
        a[(i, i)] = params.phi[(i, i)] - params.lambda[i];
    }
    Ok(DriftMatrix(a))
}

/// Dense `N x N x N` diffusion tensor, symmetric in its first two indices.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionTensor {
    n: usize,
    data: Vec<f64>,
}

impl DiffusionTensor {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.n + j) * self.n + k]
    }

    /// `B_ij(a) = sum_k B_ijk a_k`, the instantaneous covariance rate at state `a`.
    pub fn contract(&self, a: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |i, j| {
            let base = (i * n + j) * n;
            self.data[base..base + n]
                .iter()
                .zip(a.iter())
                .map(|(b, x)| b * x)
                .sum()
        })
    }
}

pub fn build_diffusion_tensor(params: &ModelParams) -> Result<DiffusionTensor> {
    params.ensure_valid()?;
    let n = params.n;
    let mut data = vec![0.0; n * n * n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                data[(i * n + j) * n + k] = if i == j {
                    params.phi[(i, k)] + if i == k { params.lambda[i] } else { 0.0 }
                } else {
                    (params.phi[(i, k)] * params.phi[(j, k)]).sqrt()
                };
            }
        }
    }
    Ok(DiffusionTensor { n, data })
}

/// Net-worths of all firms at time `t` (days).
#[derive(Debug, Clone, PartialEq)]
pub struct NetWorthVector {
    pub t: f64,
    pub a: DVector<f64>,
}

impl NetWorthVector {
    pub fn new(t: f64, a: DVector<f64>) -> Self {
        Self { t, a }
    }

    pub fn initial(a: &[f64]) -> Self {
        Self {
            t: 0.0,
            a: DVector::from_column_slice(a),
        }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub(crate) fn check_initial(&self, n: usize) -> Result<()> {
        if self.a.len() != n {
            return Err(Error::Dimension(format!(
                "net-worth vector has length {}, model has {n} firms",
                self.a.len()
            )));
        }
        if let Some(i) = self.a.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "net-worth a[{i}] = {} must be finite and nonnegative",
                self.a[i]
            )));
        }
        Ok(())
    }
}

/// On-disk JSON form of the parameters, with optional initial condition,
/// sector labels and provenance blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsDocument {
    pub n: usize,
    pub phi: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationProvenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_report: Option<FitReport>,
}

impl ParamsDocument {
    pub fn from_params(params: &ModelParams) -> Self {
        let n = params.n;
        Self {
            n,
            phi: (0..n)
                .map(|i| (0..n).map(|j| params.phi[(i, j)]).collect())
                .collect(),
            lambda: params.lambda.iter().copied().collect(),
            a0: None,
            labels: None,
            calibration: None,
            fit_report: None,
        }
    }

    /// Converts to validated parameters.
    pub fn params(&self) -> Result<ModelParams> {
        if self.lambda.len() != self.n {
            return Err(Error::Dimension(format!(
                "\"lambda\" has length {}, \"n\" is {}",
                self.lambda.len(),
                self.n
            )));
        }
        ModelParams::from_rows(&self.phi, &self.lambda)
    }

    /// Initial condition, if present and of the right length.
    pub fn initial(&self) -> Result<Option<NetWorthVector>> {
        match &self.a0 {
            None => Ok(None),
            Some(a0) => {
                let v = NetWorthVector::initial(a0);
                v.check_initial(self.n)?;
                Ok(Some(v))
            }
        }
    }

    /// Sector labels, defaulting to `"0".."N-1"`.
    pub fn labels_or_default(&self) -> Vec<String> {
        match &self.labels {
            Some(l) if l.len() == self.n => l.clone(),
            _ => (0..self.n).map(|i| i.to_string()).collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
