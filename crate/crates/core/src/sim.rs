//! Euler–Maruyama simulation of the net-worth SDE.
//!
//! ```text
//! da_i = (sum_j phi_ij a_j - lambda_i a_i) dt
//!        + sum_j sqrt(phi_ij a_j) dW^I_j - sqrt(lambda_i a_i) dW^E_i
//! ```
//!
//! The income noise `dW^I_j` belongs to the paying firm `j` and is shared by
//! every firm it pays; that sharing is what produces the off-diagonal
//! `sqrt(phi_ik phi_jk)` diffusion entries. States are clamped at zero after
//! each step.
//!
//! Each path draws from its own ChaCha8 stream (`seed`, stream = path index),
//! so a path's trajectory does not depend on how paths are scheduled.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ModelParams, NetWorthVector};
use crate::moments::MomentState;

/// Magic prefix of the binary ensemble layout.
pub const BINARY_MAGIC: &[u8; 6] = b"NGSIM1";

/// Default cap on recorded ensemble size, in bytes.
pub const DEFAULT_MAX_ENSEMBLE_BYTES: usize = 2 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    /// Negative states are set to zero; the origin is absorbing.
    #[default]
    ClampZero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub t_end: f64,
    pub paths: usize,
    pub seed: u64,
    pub boundary: Boundary,
    pub max_bytes: usize,
}

impl SimConfig {
    pub fn new(dt: f64, t_end: f64, paths: usize, seed: u64) -> Self {
        Self {
            dt,
            t_end,
            paths,
            seed,
            boundary: Boundary::ClampZero,
            max_bytes: DEFAULT_MAX_ENSEMBLE_BYTES,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= self.t_end && self.t_end.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < dt <= t_end, got dt = {}, t_end = {}",
                self.dt, self.t_end
            )));
        }
        if self.paths == 0 {
            return Err(Error::InvalidArgument("paths must be at least 1".into()));
        }
        Ok(())
    }

    /// Step index of a time that must be a multiple of `dt`.
    fn step_of(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round();
        if !(t >= 0.0) || t > self.t_end * (1.0 + 1e-12) || (k * self.dt - t).abs() > 1e-9 * t.max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "record time {t} is not a multiple of dt = {} within [0, {}]",
                self.dt, self.t_end
            )));
        }
        Ok(k as usize)
    }
}

/// Recorded paths, laid out `[path][time][firm]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub n: usize,
    pub paths: usize,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub config: SimConfig,
}

impl PathEnsemble {
    pub fn value(&self, path: usize, time_index: usize, firm: usize) -> f64 {
        self.values[(path * self.times.len() + time_index) * self.n + firm]
    }

    /// Index of a recorded time (matching within `1e-9`).
    pub fn time_index(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-9 * t.abs().max(1.0))
            .ok_or(Error::TimeNotRecorded(t))
    }

    /// All paths' values of one firm at one recorded time.
    pub fn samples(&self, firm: usize, t: f64) -> Result<Vec<f64>> {
        if firm >= self.n {
            return Err(Error::InvalidArgument(format!(
                "firm index {firm} out of range for {} firms",
                self.n
            )));
        }
        let k = self.time_index(t)?;
        Ok((0..self.paths).map(|p| self.value(p, k, firm)).collect())
    }

    /// `path,t,a_1..a_N`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["path".to_string(), "t".to_string()];
        header.extend((1..=self.n).map(|i| format!("a_{i}")));
        w.write_record(&header)?;
        let mut row = Vec::with_capacity(self.n + 2);
        for p in 0..self.paths {
            for (k, t) in self.times.iter().enumerate() {
                row.clear();
                row.push(p.to_string());
                row.push(t.to_string());
                row.extend((0..self.n).map(|i| self.value(p, k, i).to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Binary layout, all little-endian: magic `NGSIM1`, then `u64` paths,
    /// times, firms and seed, `f64` dt and t_end, the `f64` time grid, and
    /// the values in `[path][time][firm]` order.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(BINARY_MAGIC)?;
        for v in [
            self.paths as u64,
            self.times.len() as u64,
            self.n as u64,
            self.config.seed,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in [self.config.dt, self.config.t_end]
            .iter()
            .chain(&self.times)
            .chain(&self.values)
        {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        input.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Parse("not an NGSIM1 ensemble file".into()));
        }
        let mut word = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word))
        };
        let paths = next_u64(&mut input)? as usize;
        let n_times = next_u64(&mut input)? as usize;
        let n = next_u64(&mut input)? as usize;
        let seed = next_u64(&mut input)?;
        let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; count * 8];
            input.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let head = read_f64s(2)?;
        let times = read_f64s(n_times)?;
        let total = paths
            .checked_mul(n_times)
            .and_then(|v| v.checked_mul(n))
            .ok_or_else(|| Error::Parse("ensemble dimensions overflow".into()))?;
        let values = read_f64s(total)?;
        Ok(Self {
            n,
            paths,
            times,
            values,
            config: SimConfig::new(head[0], head[1], paths, seed),
        })
    }
}

/// Precomputed square roots for the inner loop.
struct StepKernel {
    n: usize,
    phi: Vec<f64>,
    sqrt_phi: Vec<f64>,
    lambda: Vec<f64>,
    sqrt_lambda: Vec<f64>,
}

impl StepKernel {
    fn new(params: &ModelParams) -> Self {
        let n = params.n;
        let phi: Vec<f64> = (0..n * n).map(|r| params.phi[(r / n, r % n)]).collect();
        Self {
            n,
            sqrt_phi: phi.iter().map(|v| v.sqrt()).collect(),
            phi,
            lambda: params.lambda.iter().copied().collect(),
            sqrt_lambda: params.lambda.iter().map(|v| v.sqrt()).collect(),
        }
    }

    /// One Euler step from `a` into `next`; `root` is scratch of length `n`.
    #[inline]
    fn step(
        &self,
        a: &[f64],
        next: &mut [f64],
        root: &mut [f64],
        w_income: &[f64],
        w_expend: &[f64],
        dt: f64,
    ) {
        let sqrt_dt = dt.sqrt();
        for (r, &x) in root.iter_mut().zip(a) {
            *r = x.max(0.0).sqrt();
        }
        for i in 0..self.n {
            let row = &self.phi[i * self.n..(i + 1) * self.n];
            let srow = &self.sqrt_phi[i * self.n..(i + 1) * self.n];
            let mut income = 0.0;
            let mut shock = 0.0;
            for j in 0..self.n {
                income += row[j] * a[j];
                shock += srow[j] * root[j] * w_income[j];
            }
            let drift = income - self.lambda[i] * a[i];
            shock -= self.sqrt_lambda[i] * root[i] * w_expend[i];
            next[i] = (a[i] + dt * drift + sqrt_dt * shock).max(0.0);
        }
    }
}

/// One Euler–Maruyama step driven by raw standard normals; `sqrt(dt)` is
/// applied here.
pub fn em_step(
    a: &NetWorthVector,
    params: &ModelParams,
    dt: f64,
    noise_income: &[f64],
    noise_expend: &[f64],
) -> Result<NetWorthVector> {
    params.ensure_valid()?;
    a.check_initial(params.n)?;
    if noise_income.len() != params.n || noise_expend.len() != params.n {
        return Err(Error::Dimension(
            "noise vectors must have one entry per firm".into(),
        ));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let kernel = StepKernel::new(params);
    let mut next = vec![0.0; params.n];
    let mut root = vec![0.0; params.n];
    kernel.step(
        a.a.as_slice(),
        &mut next,
        &mut root,
        noise_income,
        noise_expend,
        dt,
    );
    Ok(NetWorthVector::new(a.t + dt, DVector::from_vec(next)))
}

/// Simulates `config.paths` independent paths and records them at `record_grid`.
///
/// Runs on the current rayon pool; results are identical for any pool size.
pub fn run_monte_carlo(
    params: &ModelParams,
    a0: &NetWorthVector,
    config: &SimConfig,
    record_grid: &[f64],
) -> Result<PathEnsemble> {
    params.ensure_valid()?;
    a0.check_initial(params.n)?;
    config.validate()?;
    if record_grid.is_empty() {
        return Err(Error::InvalidArgument("record grid is empty".into()));
    }
    let record_steps = record_grid
        .iter()
        .map(|&t| config.step_of(t))
        .collect::<Result<Vec<_>>>()?;
    if record_steps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "record grid must be strictly ascending".into(),
        ));
    }
    let n = params.n;
    let per_path = record_grid.len() * n;
    let needed = config
        .paths
        .checked_mul(per_path)
        .and_then(|v| v.checked_mul(std::mem::size_of::<f64>()))
        .unwrap_or(usize::MAX);
    if needed > config.max_bytes {
        return Err(Error::CapExceeded {
            what: "ensemble bytes",
            needed,
            cap: config.max_bytes,
        });
    }

    let kernel = StepKernel::new(params);
    let total_steps = *record_steps.last().unwrap();
    let mut values = vec![0.0; config.paths * per_path];
    values
        .par_chunks_mut(per_path.max(1))
        .enumerate()
        .for_each(|(path, out)| {
            simulate_path(
                &kernel,
                a0.a.as_slice(),
                config,
                path as u64,
                &record_steps,
                total_steps,
                out,
            )
        });

    Ok(PathEnsemble {
        n,
        paths: config.paths,
        times: record_steps.iter().map(|&k| k as f64 * config.dt).collect(),
        values,
        config: config.clone(),
    })
}

fn simulate_path(
    kernel: &StepKernel,
    a0: &[f64],
    config: &SimConfig,
    path: u64,
    record_steps: &[usize],
    total_steps: usize,
    out: &mut [f64],
) {
    let n = kernel.n;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(path);
    let mut a = a0.to_vec();
    let mut next = vec![0.0; n];
    let mut root = vec![0.0; n];
    let mut w_income = vec![0.0; n];
    let mut w_expend = vec![0.0; n];
    let mut slots = record_steps.iter().enumerate().peekable();
    for step in 0..=total_steps {
        while let Some((slot, _)) = slots.next_if(|&(_, &k)| k == step) {
            out[slot * n..(slot + 1) * n].copy_from_slice(&a);
        }
        if step == total_steps {
            break;
        }
        for w in w_income.iter_mut().chain(w_expend.iter_mut()) {
            *w = StandardNormal.sample(&mut rng);
        }
        kernel.step(&a, &mut next, &mut root, &w_income, &w_expend, config.dt);
        std::mem::swap(&mut a, &mut next);
    }
}

/// Sample mean and covariance (denominator `paths - 1`) at a recorded time.
/// A single path yields zero covariance.
pub fn empirical_moments(ensemble: &PathEnsemble, t: f64) -> Result<MomentState> {
    let k = ensemble.time_index(t)?;
    let n = ensemble.n;
    let p = ensemble.paths;
    let mut mean = DVector::zeros(n);
    for path in 0..p {
        for i in 0..n {
            mean[i] += ensemble.value(path, k, i);
        }
    }
    mean /= p as f64;
    let mut cov = DMatrix::zeros(n, n);
    let mut dev = vec![0.0; n];
    for path in 0..p {
        for i in 0..n {
            dev[i] = ensemble.value(path, k, i) - mean[i];
        }
        for i in 0..n {
            for j in i..n {
                cov[(i, j)] += dev[i] * dev[j];
            }
        }
    }
    if p > 1 {
        cov /= (p - 1) as f64;
    }
    for i in 0..n {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    Ok(MomentState {
        t: ensemble.times[k],
        mu1: mean,
        mu2: cov,
    })
}

/// Quantile of already sorted samples, interpolating linearly between
/// adjacent order statistics at rank `(len - 1) q`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile level must lie in (0, 1), got {q}"
        )));
    }
    if sorted.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Sorts `samples` in place and returns their `q`-quantile.
pub fn sample_quantile(samples: &mut [f64], q: f64) -> Result<f64> {
    samples.sort_unstable_by(f64::total_cmp);
    quantile_sorted(samples, q)
}

pub fn empirical_quantile(ensemble: &PathEnsemble, firm: usize, t: f64, q: f64) -> Result<f64> {
    let mut samples = ensemble.samples(firm, t)?;
    sample_quantile(&mut samples, q)
}
