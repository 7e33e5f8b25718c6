//! Moment dynamics of the linear square-root diffusion.
//!
//! Because drift and diffusion coefficients are linear in the state, the
//! moments close exactly: the `m`-th moment vector obeys
//! `d mu[m]/dt = A[m] mu[m] + B[m] mu[m-1]` with `A[m]` the Kronecker sum
//! of the drift over the `m` index positions and `B[m]` a contraction of the
//! diffusion tensor over index pairs (Itô's formula on monomials).
//!
//! Two independent routes are provided for the mean/covariance pair: an
//! exact solution through the exponential of a block-triangular augmented
//! generator, and fixed-step RK4 on the coupled ODE.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expm::{matrix_exponential_capped, DEFAULT_MAX_EXPM_SIDE};
use crate::model::{
    build_diffusion_tensor, build_drift_matrix, DiffusionTensor, ModelParams, NetWorthVector,
};

/// Default cap on `N^m` accepted by [`build_moment_system`].
pub const DEFAULT_MAX_MOMENT_SIDE: usize = 1_000_000;

/// Largest RK4 step used by [`solve_moments_ode`].
pub const DEFAULT_RK4_STEP: f64 = 0.01;

/// Mean vector and central covariance at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub t: f64,
    pub mu1: DVector<f64>,
    pub mu2: DMatrix<f64>,
}

impl MomentState {
    pub fn n(&self) -> usize {
        self.mu1.len()
    }

    /// Smallest eigenvalue of the covariance.
    pub fn min_eigenvalue(&self) -> f64 {
        if self.n() == 0 {
            return 0.0;
        }
        self.mu2
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Symmetric and PSD within `1e-9 * trace`.
    pub fn is_valid_covariance(&self) -> bool {
        let sym = (&self.mu2 - self.mu2.transpose()).amax();
        let scale = self.mu2.amax().max(f64::MIN_POSITIVE);
        sym <= 1e-12 * scale && self.min_eigenvalue() >= -1e-9 * self.mu2.trace().abs()
    }
}

/// Linear system for the `m`-th order moments.
///
/// Rows of `mu[m]` are multi-indices `(i_1, .., i_m)` encoded base-`N`
/// big-endian. Columns of `B[m]` index `mu[m-1]` the same way; since raw
/// moments are symmetric, each contribution lands in the column of the
/// sorted multi-index.
#[derive(Debug, Clone)]
pub struct MomentSystem {
    order: usize,
    n: usize,
    drift: DMatrix<f64>,
    b_rows: Vec<Vec<(usize, f64)>>,
}

impl MomentSystem {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `N^m`.
    pub fn side(&self) -> usize {
        self.n.pow(self.order as u32)
    }

    /// Dense `A[m]` (`N^m x N^m`).
    pub fn a_matrix(&self) -> DMatrix<f64> {
        kronecker_sum_power(&self.drift, self.order)
    }

    /// Dense `B[m]` (`N^m x N^(m-1)`).
    pub fn b_matrix(&self) -> DMatrix<f64> {
        let cols = self.n.pow(self.order as u32 - 1);
        let mut b = DMatrix::zeros(self.side(), cols);
        for (r, row) in self.b_rows.iter().enumerate() {
            for &(c, v) in row {
                b[(r, c)] += v;
            }
        }
        b
    }

    /// Right-hand side `A[m] mu_m + B[m] mu_prev`, evaluated without forming `A[m]`.
    pub fn rhs(&self, mu_m: &DVector<f64>, mu_prev: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let side = self.side();
        let mut out = DVector::zeros(side);
        let mut digits = vec![0usize; self.order];
        for (row, slot) in out.iter_mut().enumerate() {
            decode(row, n, &mut digits);
            let mut acc = 0.0;
            // Kronecker sum: position p carries the drift, the rest is identity.
            let mut weight = side / n;
            for &ip in &digits {
                let base = row - ip * weight;
                for k in 0..n {
                    acc += self.drift[(ip, k)] * mu_m[base + k * weight];
                }
                weight /= n.max(1);
            }
            for &(c, v) in &self.b_rows[row] {
                acc += v * mu_prev[c];
            }
            *slot = acc;
        }
        out
    }
}

fn decode(mut index: usize, n: usize, digits: &mut [usize]) {
    for d in digits.iter_mut().rev() {
        *d = index % n;
        index /= n;
    }
}

fn encode(digits: &[usize], n: usize) -> usize {
    digits.iter().fold(0, |acc, &d| acc * n + d)
}

/// `A (+) A (+) ... (+) A` with `m` terms.
fn kronecker_sum_power(a: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let mut acc = a.clone();
    for _ in 1..m {
        let side = acc.nrows();
        acc = acc.kronecker(&DMatrix::identity(n, n)) + DMatrix::identity(side, side).kronecker(a);
    }
    acc
}

pub fn build_moment_system(params: &ModelParams, m: usize) -> Result<MomentSystem> {
    build_moment_system_capped(params, m, DEFAULT_MAX_MOMENT_SIDE)
}

pub fn build_moment_system_capped(params: &ModelParams, m: usize, max_side: usize) -> Result<MomentSystem> {
    if m == 0 {
        return Err(Error::InvalidArgument("moment order must be at least 1".into()));
    }
    let drift = build_drift_matrix(params)?.0;
    let tensor = build_diffusion_tensor(params)?;
    let n = params.n;
    let side = checked_side(n, m, max_side)?;

    let mut b_rows = Vec::with_capacity(side);
    let mut digits = vec![0usize; m];
    let mut rest = Vec::with_capacity(m.saturating_sub(1));
    for row in 0..side {
        decode(row, n, &mut digits);
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for p in 0..m {
            for r in (p + 1)..m {
                for k in 0..n {
                    let v = tensor.get(digits[p], digits[r], k);
                    if v == 0.0 {
                        continue;
                    }
                    rest.clear();
                    rest.extend((0..m).filter(|&q| q != p && q != r).map(|q| digits[q]));
                    rest.push(k);
                    rest.sort_unstable();
                    *acc.entry(encode(&rest, n)).or_insert(0.0) += v;
                }
            }
        }
        b_rows.push(acc.into_iter().collect());
    }
    Ok(MomentSystem {
        order: m,
        n,
        drift,
        b_rows,
    })
}

fn checked_side(n: usize, m: usize, cap: usize) -> Result<usize> {
    let mut side: usize = 1;
    for _ in 0..m {
        side = side
            .checked_mul(n)
            .filter(|s| *s <= cap)
            .ok_or(Error::CapExceeded {
                what: "moment system side N^m",
                needed: n.saturating_pow(m as u32),
                cap,
            })?;
    }
    Ok(side)
}

/// Augmented generator for `(vec(mu2), mu1)`: `[[A[2], B[2]], [0, A]]`.
fn augmented_second_order(params: &ModelParams) -> Result<DMatrix<f64>> {
    let sys2 = build_moment_system(params, 2)?;
    let n = params.n;
    let nn = n * n;
    let mut g = DMatrix::zeros(nn + n, nn + n);
    g.view_mut((0, 0), (nn, nn)).copy_from(&sys2.a_matrix());
    g.view_mut((0, nn), (nn, n)).copy_from(&sys2.b_matrix());
    g.view_mut((nn, nn), (n, n)).copy_from(&sys2.drift);
    Ok(g)
}

fn split_augmented(t: f64, z: &DVector<f64>, n: usize) -> MomentState {
    let nn = n * n;
    let mu2 = DMatrix::from_fn(n, n, |i, j| 0.5 * (z[i * n + j] + z[j * n + i]));
    MomentState {
        t,
        mu1: z.rows(nn, n).into_owned(),
        mu2,
    }
}

fn initial_augmented(a0: &NetWorthVector, n: usize) -> DVector<f64> {
    let mut z = DVector::zeros(n * n + n);
    z.rows_mut(n * n, n).copy_from(&a0.a);
    z
}

fn check_grid(t_grid: &[f64]) -> Result<()> {
    match t_grid.first() {
        None => return Err(Error::InvalidArgument("time grid is empty".into())),
        Some(&t0) if t0 != 0.0 => {
            return Err(Error::InvalidArgument(format!(
                "time grid must start at 0, starts at {t0}"
            )))
        }
        _ => {}
    }
    if let Some(w) = t_grid.windows(2).find(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "time grid must be strictly ascending ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// Mean and covariance at `t` from the exact matrix-exponential solution,
/// starting from a deterministic state (zero covariance).
pub fn solve_moments_closed_form(params: &ModelParams, a0: &NetWorthVector, t: f64) -> Result<MomentState> {
    a0.check_initial(params.n)?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "time must be finite and >= 0, got {t}"
        )));
    }
    let n = params.n;
    let g = augmented_second_order(params)?;
    let e = matrix_exponential_capped(&g, t, DEFAULT_MAX_EXPM_SIDE)?;
    Ok(split_augmented(t, &(e * initial_augmented(a0, n)), n))
}

/// Closed-form moments along an ascending grid starting at 0.
///
/// Uses the flow property: one exponential per distinct step length, so a
/// uniform grid costs a single exponential.
pub fn moment_trajectory(
    params: &ModelParams,
    a0: &NetWorthVector,
    t_grid: &[f64],
) -> Result<Vec<MomentState>> {
    a0.check_initial(params.n)?;
    check_grid(t_grid)?;
    let n = params.n;
    let g = augmented_second_order(params)?;
    let mut cache: HashMap<u64, DMatrix<f64>> = HashMap::new();
    let mut z = initial_augmented(a0, n);
    let mut out = Vec::with_capacity(t_grid.len());
    out.push(split_augmented(0.0, &z, n));
    for w in t_grid.windows(2) {
        // Steps on a uniform grid built by multiplication can differ in the last
        // ulp; round the key so they share one exponential.
        let h = w[1] - w[0];
        let key = (h * 1e12).round() as u64;
        let step = match cache.get(&key) {
            Some(e) => e,
            None => {
                let e = matrix_exponential_capped(&g, h, DEFAULT_MAX_EXPM_SIDE)?;
                cache.entry(key).or_insert(e)
            }
        };
        z = step * z;
        out.push(split_augmented(w[1], &z, n));
    }
    Ok(out)
}

/// RK4 integration of the mean/covariance ODE with the default step.
pub fn solve_moments_ode(
    params: &ModelParams,
    a0: &NetWorthVector,
    t_grid: &[f64],
) -> Result<Vec<MomentState>> {
    check_grid(t_grid)?;
    let min_gap = t_grid
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    solve_moments_ode_with_step(params, a0, t_grid, DEFAULT_RK4_STEP.min(min_gap / 10.0))
}

/// RK4 with step at most `h`; each grid interval is split into equal steps
/// so grid times are hit exactly.
pub fn solve_moments_ode_with_step(
    params: &ModelParams,
    a0: &NetWorthVector,
    t_grid: &[f64],
    h: f64,
) -> Result<Vec<MomentState>> {
    a0.check_initial(params.n)?;
    check_grid(t_grid)?;
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let drift = build_drift_matrix(params)?.0;
    let tensor = build_diffusion_tensor(params)?;
    let n = params.n;

    let mut mu1 = a0.a.clone();
    let mut mu2 = DMatrix::zeros(n, n);
    let mut out = Vec::with_capacity(t_grid.len());
    out.push(MomentState {
        t: 0.0,
        mu1: mu1.clone(),
        mu2: mu2.clone(),
    });
    for w in t_grid.windows(2) {
        let span = w[1] - w[0];
        let steps = (span / h).ceil().max(1.0) as usize;
        let dt = span / steps as f64;
        for _ in 0..steps {
            let (k1a, k1b) = ode_rhs(&drift, &tensor, &mu1, &mu2);
            let (k2a, k2b) = ode_rhs(
                &drift,
                &tensor,
                &(&mu1 + &k1a * (dt / 2.0)),
                &(&mu2 + &k1b * (dt / 2.0)),
            );
            let (k3a, k3b) = ode_rhs(
                &drift,
                &tensor,
                &(&mu1 + &k2a * (dt / 2.0)),
                &(&mu2 + &k2b * (dt / 2.0)),
            );
            let (k4a, k4b) = ode_rhs(&drift, &tensor, &(&mu1 + &k3a * dt), &(&mu2 + &k3b * dt));
            mu1 += (k1a + k2a * 2.0 + k3a * 2.0 + k4a) * (dt / 6.0);
            mu2 += (k1b + k2b * 2.0 + k3b * 2.0 + k4b) * (dt / 6.0);
            mu2 = (&mu2 + mu2.transpose()) * 0.5;
        }
        out.push(MomentState {
            t: w[1],
            mu1: mu1.clone(),
            mu2: mu2.clone(),
        });
    }
    Ok(out)
}

fn ode_rhs(
    drift: &DMatrix<f64>,
    tensor: &DiffusionTensor,
    mu1: &DVector<f64>,
    mu2: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let d1 = drift * mu1;
    let a_mu2 = drift * mu2;
    let d2 = &a_mu2 + a_mu2.transpose() + tensor.contract(mu1);
    (d1, d2)
}

/// Raw (non-central) `m`-th moments at `t`, starting from `mu[p](0) = a0^(p)`.
///
/// All orders `1..=m` are stacked into one block-bidiagonal generator, so the
/// convolution integral of each order against the one below is evaluated
/// exactly by a single matrix exponential.
pub fn solve_higher_moments(
    params: &ModelParams,
    a0: &NetWorthVector,
    m: usize,
    t: f64,
) -> Result<DVector<f64>> {
    a0.check_initial(params.n)?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "time must be finite and >= 0, got {t}"
        )));
    }
    let systems = (1..=m)
        .map(|p| build_moment_system(params, p))
        .collect::<Result<Vec<_>>>()?;
    if systems.is_empty() {
        return Err(Error::InvalidArgument("moment order must be at least 1".into()));
    }
    let sides: Vec<usize> = systems.iter().map(|s| s.side()).collect();
    let total: usize = sides.iter().sum();
    if total > DEFAULT_MAX_EXPM_SIDE {
        return Err(Error::CapExceeded {
            what: "stacked moment generator side",
            needed: total,
            cap: DEFAULT_MAX_EXPM_SIDE,
        });
    }
    // Block p (0-based, order p+1) starts at offsets[p].
    let offsets: Vec<usize> = sides
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    let mut g = DMatrix::zeros(total, total);
    let mut z0 = DVector::zeros(total);
    let mut power = DVector::from_element(1, 1.0);
    for (p, sys) in systems.iter().enumerate() {
        g.view_mut((offsets[p], offsets[p]), (sides[p], sides[p]))
            .copy_from(&sys.a_matrix());
        if p > 0 {
            g.view_mut((offsets[p], offsets[p - 1]), (sides[p], sides[p - 1]))
                .copy_from(&sys.b_matrix());
        }
        power = power.kronecker(&a0.a);
        z0.rows_mut(offsets[p], sides[p]).copy_from(&power);
    }
    let e = matrix_exponential_capped(&g, t, DEFAULT_MAX_EXPM_SIDE)?;
    let z = e * z0;
    Ok(z.rows(offsets[m - 1], sides[m - 1]).into_owned())
}

/// Writes `t,mu1_1..mu1_N,mu2_11,mu2_12,...,mu2_NN`.
pub fn write_moments_csv<W: Write>(out: W, states: &[MomentState]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = states.first().map_or(0, |s| s.n());
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("mu1_{i}")));
    for i in 1..=n {
        for j in 1..=n {
            header.push(format!("mu2_{i}{j}"));
        }
    }
    w.write_record(&header)?;
    for s in states {
        let mut row = vec![s.t.to_string()];
        row.extend(s.mu1.iter().map(|v| v.to_string()));
        for i in 0..n {
            for j in 0..n {
                row.push(s.mu2[(i, j)].to_string());
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar() -> (ModelParams, NetWorthVector) {
        (
            ModelParams::from_rows(&[vec![0.0]], &[0.1]).unwrap(),
            NetWorthVector::initial(&[100.0]),
        )
    }

    fn random_system(rng: &mut ChaCha8Rng, n: usize) -> (ModelParams, NetWorthVector) {
        let phi: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.random_range(0.01..0.3)).collect())
            .collect();
        let lambda: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.4)).collect();
        let a0: Vec<f64> = (0..n).map(|_| rng.random_range(10.0..200.0)).collect();
        (
            ModelParams::from_rows(&phi, &lambda).unwrap(),
            NetWorthVector::initial(&a0),
        )
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn first_order_system_is_drift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, _) = random_system(&mut rng, 3);
        let s = build_moment_system(&p, 1).unwrap();
        assert_eq!(s.a_matrix(), build_drift_matrix(&p).unwrap().0);
        let b = s.b_matrix();
        assert_eq!(b.shape(), (3, 1));
        assert!(b.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_second_order_system() {
        let (p, _) = scalar();
        let s = build_moment_system(&p, 2).unwrap();
        assert!((s.a_matrix()[(0, 0)] + 0.2).abs() < 1e-15);
        assert!((s.b_matrix()[(0, 0)] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn second_order_rhs_matches_entrywise_covariance_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [2usize, 3] {
            let (p, _) = random_system(&mut rng, n);
            let a = build_drift_matrix(&p).unwrap().0;
            let b = build_diffusion_tensor(&p).unwrap();
            let s = build_moment_system(&p, 2).unwrap();
            let mu1 = DVector::from_fn(n, |_, _| rng.random_range(1.0..10.0));
            let raw = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let mu2 = &raw + raw.transpose();
            let vec2 = DVector::from_fn(n * n, |r, _| mu2[(r / n, r % n)]);
            let got = s.rhs(&vec2, &mu1);
            let dense = s.a_matrix() * &vec2 + s.b_matrix() * &mu1;
            for i in 0..n {
                for j in 0..n {
                    let mut want = 0.0;
                    for k in 0..n {
                        want += a[(i, k)] * mu2[(k, j)] + a[(j, k)] * mu2[(k, i)] + b.get(i, j, k) * mu1[k];
                    }
                    assert!((got[i * n + j] - want).abs() < 1e-12);
                    assert!((dense[i * n + j] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cap_is_enforced() {
        let (p, _) = scalar();
        let p3 = ModelParams::from_rows(&vec![vec![0.0; 3]; 3], &[0.1; 3]).unwrap();
        assert!(build_moment_system(&p, 0).is_err());
        assert!(matches!(
            build_moment_system_capped(&p3, 3, 26),
            Err(Error::CapExceeded { .. })
        ));
        assert!(build_moment_system_capped(&p3, 3, 27).is_ok());
    }

    #[test]
    fn scalar_closed_form() {
        let (p, a0) = scalar();
        let s = solve_moments_closed_form(&p, &a0, 30.0).unwrap();
        assert!(rel(s.mu1[0], 100.0 * (-3.0f64).exp()) < 1e-12);
        let s = solve_moments_closed_form(&p, &a0, 10.0).unwrap();
        let want = 100.0 * ((-1.0f64).exp() - (-2.0f64).exp());
        assert!(rel(s.mu2[(0, 0)], want) < 1e-12);
        assert!((s.mu2[(0, 0)] - 23.2544).abs() < 1e-4);

        let s = solve_moments_closed_form(&p, &a0, 0.0).unwrap();
        assert_eq!(s.mu1[0], 100.0);
        assert_eq!(s.mu2[(0, 0)], 0.0);
    }

    #[test]
    fn ode_scalar_and_zero_generator() {
        let (p, a0) = scalar();
        let grid: Vec<f64> = (0..=30).map(f64::from).collect();
        let states = solve_moments_ode(&p, &a0, &grid).unwrap();
        assert!(rel(states[30].mu1[0], 4.978_706_836_786_394) < 1e-6);

        let z = ModelParams::zeros(2);
        let a0 = NetWorthVector::initial(&[3.0, 4.0]);
        for s in solve_moments_ode(&z, &a0, &[0.0, 1.0, 5.0]).unwrap() {
            assert_eq!(s.mu1, a0.a);
            assert!(s.mu2.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn grid_validation() {
        let (p, a0) = scalar();
        assert!(solve_moments_ode(&p, &a0, &[]).is_err());
        assert!(solve_moments_ode(&p, &a0, &[0.0, 2.0, 1.0]).is_err());
        assert!(solve_moments_ode(&p, &a0, &[1.0, 2.0]).is_err());
        assert!(moment_trajectory(&p, &a0, &[0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn random_two_firm_cross_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, a0) = random_system(&mut rng, 2);
        let exact = solve_moments_closed_form(&p, &a0, 5.0).unwrap();
        let ode = solve_moments_ode(&p, &a0, &[0.0, 5.0]).unwrap().pop().unwrap();
        for (x, y) in ode.mu1.iter().zip(exact.mu1.iter()) {
            assert!(rel(*x, *y) < 1e-6);
        }
        for (x, y) in ode.mu2.iter().zip(exact.mu2.iter()) {
            assert!(rel(*x, *y) < 1e-6);
        }
    }

    #[test]
    fn trajectory_matches_pointwise_solution_and_stays_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, a0) = random_system(&mut rng, 3);
        let grid: Vec<f64> = (0..=20).map(|k| k as f64 * 0.5).collect();
        let traj = moment_trajectory(&p, &a0, &grid).unwrap();
        for s in &traj {
            assert!(s.is_valid_covariance(), "t = {}", s.t);
        }
        let direct = solve_moments_closed_form(&p, &a0, 10.0).unwrap();
        let last = traj.last().unwrap();
        for (x, y) in last.mu2.iter().zip(direct.mu2.iter()) {
            assert!(rel(*x, *y) < 1e-10);
        }
    }

    #[test]
    fn mean_linearity_flow_and_conservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, a0) = random_system(&mut rng, 3);
        let drift = build_drift_matrix(&p).unwrap().0;

        let base = solve_moments_closed_form(&p, &a0, 4.0).unwrap();
        let scaled = solve_moments_closed_form(&p, &NetWorthVector::new(0.0, &a0.a * 2.5), 4.0).unwrap();
        for (x, y) in scaled.mu1.iter().zip(base.mu1.iter()) {
            assert!(rel(*x, 2.5 * y) < 1e-12);
        }

        let t1 = solve_moments_closed_form(&p, &a0, 1.5).unwrap();
        let t12 = solve_moments_closed_form(&p, &a0, 4.0).unwrap();
        let flowed = crate::expm::matrix_exponential(&drift, 2.5).unwrap() * &t1.mu1;
        for (x, y) in flowed.iter().zip(t12.mu1.iter()) {
            assert!(rel(*x, *y) < 1e-10);
        }

        // lambda_i = sum_j phi_ji: every unit spent is earned by someone.
        let mut q = p.clone();
        for i in 0..3 {
            q.lambda[i] = (0..3).map(|j| q.phi[(j, i)]).sum();
        }
        let total0: f64 = a0.a.sum();
        for &t in &[1.0, 7.0, 20.0] {
            let s = solve_moments_closed_form(&q, &a0, t).unwrap();
            assert!(rel(s.mu1.sum(), total0) < 1e-8);
        }
    }

    #[test]
    fn higher_moments_reduce_to_known_cases() {
        let (p, a0) = scalar();
        let m1 = solve_higher_moments(&p, &a0, 1, 10.0).unwrap();
        assert!(rel(m1[0], 100.0 * (-1.0f64).exp()) < 1e-12);

        let m2 = solve_higher_moments(&p, &a0, 2, 10.0).unwrap();
        let central = solve_moments_closed_form(&p, &a0, 10.0).unwrap();
        let want = central.mu2[(0, 0)] + central.mu1[0].powi(2);
        assert!(rel(m2[0], want) < 1e-10);
        assert!((m2[0] - 1376.607).abs() < 1e-3);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (p, a0) = random_system(&mut rng, 2);
        let raw = solve_higher_moments(&p, &a0, 2, 3.0).unwrap();
        let c = solve_moments_closed_form(&p, &a0, 3.0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!(rel(raw[i * 2 + j], c.mu2[(i, j)] + c.mu1[i] * c.mu1[j]) < 1e-10);
            }
        }
    }

    #[test]
    fn third_moment_against_quadrature_of_convolution() {
        // Independent route: mu3(t) = e^{3at} a0^3 + int_0^t e^{3a(t-s)} b3 mu2(s) ds,
        // with mu2(s) known in closed form for the scalar case.
        let (p, a0) = scalar();
        let lam = 0.1;
        let x0 = 100.0;
        let t = 10.0;
        let mu2 = |s: f64| {
            let m = x0 * (-lam * s).exp();
            x0 * ((-lam * s).exp() - (-2.0 * lam * s).exp()) + m * m
        };
        let b3 = 3.0 * lam;
        let f = |s: f64| (-3.0 * lam * (t - s)).exp() * b3 * mu2(s);
        let k = 20_000;
        let h = t / k as f64;
        let mut integral = f(0.0) + f(t);
        for i in 1..k {
            integral += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        integral *= h / 3.0;
        let want = (-3.0 * lam * t).exp() * x0.powi(3) + integral;
        let got = solve_higher_moments(&p, &a0, 3, t).unwrap();
        assert!(rel(got[0], want) < 1e-10, "{} vs {want}", got[0]);
    }

    #[test]
    fn csv_layout() {
        let (p, a0) = scalar();
        let states = moment_trajectory(&p, &a0, &[0.0, 1.0]).unwrap();
        let mut buf = Vec::new();
        write_moments_csv(&mut buf, &states).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,mu1_1,mu2_11"));
        assert_eq!(lines.next(), Some("0,100,0"));
        assert_eq!(lines.count(), 1);
    }
}
