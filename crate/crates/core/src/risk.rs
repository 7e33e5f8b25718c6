//! Value at risk, conditional value at risk and relative downward risk under
//! the Gaussian approximation of the net-worth distribution.
//!
//! With `psi(q) = erfinv(2q - 1)` the `q`-quantile of `N(m, s2)` is
//! `m + sqrt(2 s2) psi(q)`. The conditional value at risk of firm `i` given
//! that firm `j` sits at its own value at risk is the quantile of the
//! Gaussian conditional law of `a_i | a_j = V_j`.

use std::f64::consts::PI;
use std::io::Write;

use libm::erfc;

use crate::error::{Error, Result};
use crate::model::{ModelParams, NetWorthVector};
use crate::moments::{moment_trajectory, MomentState};
use crate::sim::{sample_quantile, PathEnsemble};

/// Quantile level `q` with its standardized factor `psi = erfinv(2q - 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileSpec {
    pub q: f64,
    pub psi: f64,
}

impl QuantileSpec {
    pub fn new(q: f64) -> Result<Self> {
        Ok(Self {
            q,
            psi: psi_quantile(q)?,
        })
    }
}

/// `erfinv(2q - 1)` for `0 < q < 1`.
///
/// Acklam's rational approximation of the normal quantile gives a start with
/// relative error below `1.2e-9`; two Halley steps on `erfc(-x) - 2q` (which
/// keeps full relative precision in the lower tail) finish the job.
pub fn psi_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile level must lie in (0, 1), got {q}"
        )));
    }
    if q > 0.5 {
        return Ok(-psi_lower(1.0 - q));
    }
    Ok(psi_lower(q))
}

fn psi_lower(q: f64) -> f64 {
    if q == 0.5 {
        return 0.0;
    }
    let mut x = normal_quantile_acklam(q) * std::f64::consts::FRAC_1_SQRT_2;
    for _ in 0..2 {
        let f = erfc(-x) - 2.0 * q;
        let slope = 2.0 / PI.sqrt() * (-x * x).exp();
        if slope == 0.0 {
            break;
        }
        let newton = f / slope;
        x -= newton / (1.0 + x * newton);
    }
    x
}

fn normal_quantile_acklam(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// `q`-quantile of the Gaussian marginal `N(mu1, mu2)`.
pub fn value_at_risk(mu1: f64, mu2: f64, q: f64) -> Result<f64> {
    if !(mu2 >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "variance must be nonnegative, got {mu2}"
        )));
    }
    let psi = psi_quantile(q)?;
    if mu2 == 0.0 {
        return Ok(mu1);
    }
    Ok(mu1 + (2.0 * mu2).sqrt() * psi)
}

/// Conditional variance `mu2_ii - mu2_ij^2 / mu2_jj`, after checking the
/// 2x2 covariance is PSD (up to rounding) and `mu2_jj > 0`.
fn conditional_variance(mu2_ii: f64, mu2_jj: f64, mu2_ij: f64) -> Result<f64> {
    if !(mu2_jj > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "conditioning variance must be positive, got {mu2_jj}"
        )));
    }
    let det = mu2_ii * mu2_jj - mu2_ij * mu2_ij;
    if !(mu2_ii >= 0.0) || det < -1e-12 * (mu2_ii * mu2_jj).abs() || !mu2_ij.is_finite() {
        return Err(Error::NotPositiveDefinite(format!(
            "[[{mu2_ii}, {mu2_ij}], [{mu2_ij}, {mu2_jj}]]"
        )));
    }
    Ok((mu2_ii - mu2_ij * mu2_ij / mu2_jj).max(0.0))
}

/// `q`-quantile of `a_i` conditioned on `a_j` equal to its own `q`-quantile.
pub fn conditional_value_at_risk(
    mu1_i: f64,
    mu1_j: f64,
    mu2_ii: f64,
    mu2_jj: f64,
    mu2_ij: f64,
    q: f64,
) -> Result<f64> {
    let var_c = conditional_variance(mu2_ii, mu2_jj, mu2_ij)?;
    let psi = psi_quantile(q)?;
    let v_j = mu1_j + (2.0 * mu2_jj).sqrt() * psi;
    let mean_c = mu1_i + mu2_ij / mu2_jj * (v_j - mu1_j);
    Ok(mean_c + (2.0 * var_c).sqrt() * psi)
}

/// `(C_ij - mu1_i) / mu1_i`, with the covariance term carried with its sign.
pub fn relative_risk(mu1_i: f64, mu2_ii: f64, mu2_jj: f64, mu2_ij: f64, q: f64) -> Result<f64> {
    if !(mu1_i > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "mean net-worth must be positive, got {mu1_i}"
        )));
    }
    let var_c = conditional_variance(mu2_ii, mu2_jj, mu2_ij)?;
    let psi = psi_quantile(q)?;
    Ok((mu2_ij * (2.0 / mu2_jj).sqrt() + (2.0 * var_c).sqrt()) * psi / mu1_i)
}

/// One evaluation of the risk measures for firm `i` at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskPoint {
    pub t: f64,
    pub i: usize,
    /// Mean net-worth of firm `i`.
    pub mu1: f64,
    /// Marginal value at risk of firm `i`.
    pub v: f64,
    /// Conditional value at risk of firm `i` given the stressed firm.
    pub c: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskCurve {
    pub source_j: usize,
    pub q: f64,
    pub points: Vec<RiskPoint>,
}

/// Evaluates `V`, `C` and `R` of every firm against a stressed firm `j`
/// from moments at one instant.
///
/// While the stressed firm has zero variance (e.g. at `t = 0`) conditioning
/// carries no information and `C` falls back to the marginal quantile.
pub fn risk_points(state: &MomentState, source_j: usize, q: f64) -> Result<Vec<RiskPoint>> {
    let n = state.n();
    if source_j >= n {
        return Err(Error::InvalidArgument(format!(
            "source index {source_j} out of range for {n} firms"
        )));
    }
    let mu2_jj = state.mu2[(source_j, source_j)];
    (0..n)
        .map(|i| {
            let mu1_i = state.mu1[i];
            let mu2_ii = state.mu2[(i, i)];
            let v = value_at_risk(mu1_i, mu2_ii.max(0.0), q)?;
            let (c, r) = if mu2_jj > 0.0 {
                let mu2_ij = state.mu2[(i, source_j)];
                let c = conditional_value_at_risk(mu1_i, state.mu1[source_j], mu2_ii, mu2_jj, mu2_ij, q)?;
                (c, relative_risk(mu1_i, mu2_ii, mu2_jj, mu2_ij, q)?)
            } else {
                if !(mu1_i > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "mean net-worth of firm {i} must be positive, got {mu1_i}"
                    )));
                }
                (v, (v - mu1_i) / mu1_i)
            };
            Ok(RiskPoint {
                t: state.t,
                i,
                mu1: mu1_i,
                v,
                c,
                r,
            })
        })
        .collect()
}

/// Risk of every firm against `source_j` along an ascending grid from 0.
pub fn risk_curve(
    params: &ModelParams,
    a0: &NetWorthVector,
    source_j: usize,
    q: f64,
    t_grid: &[f64],
) -> Result<RiskCurve> {
    if source_j >= params.n {
        return Err(Error::InvalidArgument(format!(
            "source index {source_j} out of range for {} firms",
            params.n
        )));
    }
    psi_quantile(q)?;
    let states = moment_trajectory(params, a0, t_grid)?;
    let mut points = Vec::with_capacity(states.len() * params.n);
    for s in &states {
        points.extend(risk_points(s, source_j, q)?);
    }
    Ok(RiskCurve { source_j, q, points })
}

impl RiskCurve {
    /// Points at the last recorded time.
    pub fn last_points(&self) -> Vec<RiskPoint> {
        let Some(last) = self.points.last() else {
            return Vec::new();
        };
        let t = last.t;
        self.points.iter().filter(|p| p.t == t).copied().collect()
    }

    /// Firms at the last time ordered by descending `|R|` (ties by index).
    pub fn ranking(&self) -> Vec<RiskPoint> {
        let mut pts = self.last_points();
        pts.sort_by(|a, b| b.r.abs().total_cmp(&a.r.abs()).then(a.i.cmp(&b.i)));
        pts
    }

    /// `t,i,sector_label,V,C,R`.
    pub fn write_csv<W: Write>(&self, out: W, labels: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "i", "sector_label", "V", "C", "R"])?;
        for p in &self.points {
            w.write_record([
                p.t.to_string(),
                p.i.to_string(),
                label(labels, p.i),
                p.v.to_string(),
                p.c.to_string(),
                p.r.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `rank,i,sector_label,R` at the last time.
    pub fn write_ranking_csv<W: Write>(&self, out: W, labels: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rank", "i", "sector_label", "R"])?;
        for (rank, p) in self.ranking().iter().enumerate() {
            w.write_record([
                (rank + 1).to_string(),
                p.i.to_string(),
                label(labels, p.i),
                p.r.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn label(labels: &[String], i: usize) -> String {
    labels.get(i).cloned().unwrap_or_else(|| i.to_string())
}

/// Ensemble `q`-quantile of firm `j` at `t`.
pub fn empirical_value_at_risk(ensemble: &PathEnsemble, j: usize, t: f64, q: f64) -> Result<f64> {
    crate::sim::empirical_quantile(ensemble, j, t, q)
}

/// Ensemble `q`-quantile of firm `i` over the paths whose firm `j` lies
/// within `band * |v_j|` of `v_j`. Returns the quantile and the number of
/// paths in the band.
pub fn empirical_conditional_value_at_risk(
    ensemble: &PathEnsemble,
    i: usize,
    j: usize,
    t: f64,
    v_j: f64,
    band: f64,
    q: f64,
) -> Result<(f64, usize)> {
    let xi = ensemble.samples(i, t)?;
    let xj = ensemble.samples(j, t)?;
    let half = band * v_j.abs();
    let mut selected: Vec<f64> = xi
        .into_iter()
        .zip(xj)
        .filter(|(_, b)| (b - v_j).abs() <= half)
        .map(|(a, _)| a)
        .collect();
    if selected.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no paths within the band around {v_j}"
        )));
    }
    let count = selected.len();
    Ok((sample_quantile(&mut selected, q)?, count))
}
