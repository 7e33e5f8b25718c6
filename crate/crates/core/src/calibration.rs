//! Calibration of trade and expenditure rates from an input-output table.
//!
//! Pipeline: input coefficients `c_ij = x_ij / X_j` become daily trade rates
//! `phi_ij = c_ij / time_unit_days`; each sector is represented by a firm
//! holding `firm_share` of the sector output; expenditure rates follow from
//! requiring the mean dynamics to reproduce the sector growth rate at `t = 0`:
//! `g_i a_i = sum_j phi_ij a_j - lambda_i a_i`.

use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, NetWorthVector, ParamsDocument};

/// Inter-sector transactions (row sells to column) and sector outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct IoTable {
    pub labels: Vec<String>,
    pub transactions: DMatrix<f64>,
    pub outputs: DVector<f64>,
}

impl IoTable {
    pub fn new(labels: Vec<String>, transactions: DMatrix<f64>, outputs: DVector<f64>) -> Result<Self> {
        let table = Self {
            labels,
            transactions,
            outputs,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn n_sectors(&self) -> usize {
        self.outputs.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.outputs.len();
        if n == 0 {
            return Err(Error::InvalidArgument("input-output table has no sectors".into()));
        }
        if self.transactions.shape() != (n, n) || self.labels.len() != n {
            return Err(Error::Dimension(format!(
                "table has {} labels, {}x{} transactions and {n} outputs",
                self.labels.len(),
                self.transactions.nrows(),
                self.transactions.ncols()
            )));
        }
        for ((i, j), v) in self
            .transactions
            .iter()
            .enumerate()
            .map(|(k, v)| ((k % n, k / n), v))
        {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "transaction ({}, {}) = {v} must be finite and nonnegative",
                    self.labels[i], self.labels[j]
                )));
            }
        }
        for j in 0..n {
            let out = self.outputs[j];
            if !out.is_finite() || out <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "output of {} = {out} must be positive",
                    self.labels[j]
                )));
            }
            let used: f64 = self.transactions.column(j).sum();
            if used > out {
                return Err(Error::InvalidArgument(format!(
                    "intermediate inputs of {} ({used}) exceed its output ({out})",
                    self.labels[j]
                )));
            }
        }
        Ok(())
    }

    /// Reads the canonical layout: header `label,x_1,...,x_N,output`, then
    /// one row per sector `label_i,x_i1,...,x_iN,output_i`.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let headers = reader.headers()?.clone();
        let cols: Vec<&str> = headers.iter().collect();
        if cols.first() != Some(&"label") {
            return Err(Error::Parse(format!(
                "line 1: first column must be `label`, got `{}`",
                cols.first().unwrap_or(&"")
            )));
        }
        if cols.last() != Some(&"output") || cols.len() < 3 {
            return Err(Error::Parse(
                "line 1: missing `output` column (header must be `label,x_1..x_N,output`)".into(),
            ));
        }
        let n = cols.len() - 2;
        for (k, name) in cols[1..=n].iter().enumerate() {
            if *name != format!("x_{}", k + 1) {
                return Err(Error::Parse(format!(
                    "line 1: column {} must be `x_{}`, got `{name}`",
                    k + 2,
                    k + 1
                )));
            }
        }
        let mut labels = Vec::with_capacity(n);
        let mut transactions = DMatrix::zeros(n, n);
        let mut outputs = DVector::zeros(n);
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = row + 2;
            if row >= n {
                return Err(Error::Parse(format!(
                    "line {line}: more rows than the {n} sector columns"
                )));
            }
            if rec.len() != n + 2 {
                return Err(Error::Parse(format!(
                    "line {line}: expected {} fields, got {}",
                    n + 2,
                    rec.len()
                )));
            }
            labels.push(rec[0].to_string());
            for j in 0..n {
                transactions[(row, j)] = parse_number(&rec[j + 1], line)?;
            }
            outputs[row] = parse_number(&rec[n + 1], line)?;
        }
        if labels.len() != n {
            return Err(Error::Parse(format!(
                "table has {} rows but {n} sector columns",
                labels.len()
            )));
        }
        Self::new(labels, transactions, outputs)
    }
}

fn parse_number(field: &str, line: usize) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|e| Error::Parse(format!("line {line}: bad number `{field}`: {e}")))
}

/// Reads `label,annual_growth` and orders the rates by `labels`.
pub fn read_growth_csv<R: Read>(input: R, labels: &[String]) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["label", "annual_growth"] {
        return Err(Error::Parse(
            "line 1: growth header must be `label,annual_growth`".into(),
        ));
    }
    let mut rates: Vec<Option<f64>> = vec![None; labels.len()];
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        if rec.len() != 2 {
            return Err(Error::Parse(format!(
                "line {line}: expected 2 fields, got {}",
                rec.len()
            )));
        }
        let idx = labels
            .iter()
            .position(|l| l == &rec[0])
            .ok_or_else(|| Error::Parse(format!("line {line}: unknown sector `{}`", &rec[0])))?;
        if rates[idx].is_some() {
            return Err(Error::Parse(format!(
                "line {line}: duplicate sector `{}`",
                &rec[0]
            )));
        }
        rates[idx] = Some(parse_number(&rec[1], line)?);
    }
    labels
        .iter()
        .zip(rates)
        .map(|(l, r)| r.ok_or_else(|| Error::Parse(format!("no growth rate for sector `{l}`"))))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    /// Days per year; converts annual coefficients and growth rates to daily.
    pub time_unit_days: f64,
    /// Production share of each representative firm.
    pub firm_share: f64,
    /// Annual growth rates, one per sector.
    pub growth_rates: Vec<f64>,
}

impl CalibrationConfig {
    pub fn new(growth_rates: Vec<f64>) -> Self {
        Self {
            time_unit_days: 365.0,
            firm_share: 0.01,
            growth_rates,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.time_unit_days > 0.0 && self.time_unit_days.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "time unit must be positive, got {}",
                self.time_unit_days
            )));
        }
        if !(self.firm_share > 0.0 && self.firm_share <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "firm share must lie in (0, 1], got {}",
                self.firm_share
            )));
        }
        Ok(())
    }

    /// Growth rates converted to per-day.
    pub fn daily_growth(&self) -> Vec<f64> {
        self.growth_rates
            .iter()
            .map(|g| g / self.time_unit_days)
            .collect()
    }
}

/// `c_ij = transactions_ij / outputs_j`.
pub fn leontief_coefficients(table: &IoTable) -> Result<DMatrix<f64>> {
    let n = table.n_sectors();
    if let Some(j) = (0..n).find(|&j| !(table.outputs[j] > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "sector {} has zero output",
            table.labels[j]
        )));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        table.transactions[(i, j)] / table.outputs[j]
    }))
}

/// Daily trade rates `c / time_unit_days`.
pub fn calibrate_phi(c: &DMatrix<f64>, config: &CalibrationConfig) -> DMatrix<f64> {
    c / config.time_unit_days
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaCalibration {
    pub lambda: DVector<f64>,
    /// Sectors whose balance rate came out negative and was set to zero.
    pub clamped: Vec<usize>,
}

/// `lambda_i = (sum_j phi_ij a0_j) / a0_i - g_i`, clamped at zero.
/// `growth_per_day` is in the same time unit as `phi`.
pub fn calibrate_lambda(
    phi: &DMatrix<f64>,
    a0: &NetWorthVector,
    growth_per_day: &[f64],
) -> Result<LambdaCalibration> {
    let n = a0.len();
    if phi.shape() != (n, n) || growth_per_day.len() != n {
        return Err(Error::Dimension(
            "phi, a0 and growth rates must agree on N".into(),
        ));
    }
    if let Some(i) = a0.a.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument(format!("a0[{i}] must be positive")));
    }
    let income = phi * &a0.a;
    let mut clamped = Vec::new();
    let lambda = DVector::from_fn(n, |i, _| {
        let raw = income[i] / a0.a[i] - growth_per_day[i];
        if raw < 0.0 {
            clamped.push(i);
            0.0
        } else {
            raw
        }
    });
    Ok(LambdaCalibration { lambda, clamped })
}

/// `a0_i = firm_share * outputs_i`.
pub fn representative_firm_initials(outputs: &DVector<f64>, config: &CalibrationConfig) -> NetWorthVector {
    NetWorthVector::new(0.0, outputs * config.firm_share)
}

/// Provenance block stored with calibrated parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProvenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub io_table: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth: Option<String>,
    pub firm_share: f64,
    pub time_unit_days: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clamped_lambda: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub params: ModelParams,
    pub a0: NetWorthVector,
    pub labels: Vec<String>,
    pub clamped: Vec<usize>,
}

impl Calibration {
    pub fn to_document(
        &self,
        config: &CalibrationConfig,
        io_table: Option<String>,
        growth: Option<String>,
    ) -> ParamsDocument {
        let mut doc = ParamsDocument::from_params(&self.params);
        doc.a0 = Some(self.a0.a.iter().copied().collect());
        doc.labels = Some(self.labels.clone());
        doc.calibration = Some(CalibrationProvenance {
            io_table,
            growth,
            firm_share: config.firm_share,
            time_unit_days: config.time_unit_days,
            clamped_lambda: self.clamped.iter().map(|&i| self.labels[i].clone()).collect(),
        });
        doc
    }
}

/// Full pipeline: coefficients, trade rates, representative firms, expenditure rates.
pub fn calibrate(table: &IoTable, config: &CalibrationConfig) -> Result<Calibration> {
    table.validate()?;
    config.validate()?;
    if config.growth_rates.len() != table.n_sectors() {
        return Err(Error::Dimension(format!(
            "{} growth rates for {} sectors",
            config.growth_rates.len(),
            table.n_sectors()
        )));
    }
    let c = leontief_coefficients(table)?;
    let phi = calibrate_phi(&c, config);
    let a0 = representative_firm_initials(&table.outputs, config);
    let lam = calibrate_lambda(&phi, &a0, &config.daily_growth())?;
    Ok(Calibration {
        params: ModelParams::new(phi, lam.lambda)?,
        a0,
        labels: table.labels.clone(),
        clamped: lam.clamped,
    })
}
