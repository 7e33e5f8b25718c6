//! Matrix exponential by scaling and squaring with diagonal Padé approximants.
//!
//! Follows Higham, "The scaling and squaring method for the matrix
//! exponential revisited" (SIAM J. Matrix Anal. Appl. 26(4), 2005): pick the
//! lowest Padé degree in {3, 5, 7, 9, 13} whose backward-error bound covers
//! the 1-norm, otherwise scale by `2^-s` into the degree-13 region and square
//! back. The trace is shifted out first, which is exact and shrinks the norm
//! of the strongly damped generators this crate produces.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Largest side accepted by [`matrix_exponential`].
pub const DEFAULT_MAX_EXPM_SIDE: usize = 4096;

const THETA_3: f64 = 1.495_585_217_958_292e-2;
const THETA_5: f64 = 2.539_398_330_063_23e-1;
const THETA_7: f64 = 9.504_178_996_162_932e-1;
const THETA_9: f64 = 2.097_847_961_257_068;
const THETA_13: f64 = 5.371_920_351_148_152;

const PADE_3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE_5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE_7: [f64; 8] = [
    17_297_280.0,
    8_648_640.0,
    1_995_840.0,
    277_200.0,
    25_200.0,
    1_512.0,
    56.0,
    1.0,
];
const PADE_9: [f64; 10] = [
    17_643_225_600.0,
    8_821_612_800.0,
    2_075_673_600.0,
    302_702_400.0,
    30_270_240.0,
    2_162_160.0,
    110_880.0,
    3_960.0,
    90.0,
    1.0,
];
const PADE_13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

/// `exp(m * t)` for a square matrix.
pub fn matrix_exponential(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    matrix_exponential_capped(m, t, DEFAULT_MAX_EXPM_SIDE)
}

pub fn matrix_exponential_capped(m: &DMatrix<f64>, t: f64, max_side: usize) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "matrix exponential needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let n = m.nrows();
    if n > max_side {
        return Err(Error::CapExceeded {
            what: "matrix exponential side",
            needed: n,
            cap: max_side,
        });
    }
    if !t.is_finite() || m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix_exponential"));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }

    let mut a = m * t;
    let shift = a.trace() / n as f64;
    for i in 0..n {
        a[(i, i)] -= shift;
    }

    let norm = one_norm(&a);
    let mut e = if norm <= THETA_3 {
        pade_low(&a, &PADE_3)?
    } else if norm <= THETA_5 {
        pade_low(&a, &PADE_5)?
    } else if norm <= THETA_7 {
        pade_low(&a, &PADE_7)?
    } else if norm <= THETA_9 {
        pade_low(&a, &PADE_9)?
    } else {
        let s = if norm > THETA_13 {
            (norm / THETA_13).log2().ceil().max(0.0) as i32
        } else {
            0
        };
        let scaled = a * 2f64.powi(-s);
        let mut r = pade_13(&scaled)?;
        for _ in 0..s {
            r = &r * &r;
        }
        r
    };

    e *= shift.exp();
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::ExpmOverflow);
    }
    Ok(e)
}

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Degrees 3..9: `U = A * sum odd`, `V = sum even` over powers of `A^2`.
fn pade_low(a: &DMatrix<f64>, b: &[f64]) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let mut powers = vec![ident.clone()];
    for _ in 1..b.len().div_ceil(2) {
        let next = powers.last().unwrap() * &a2;
        powers.push(next);
    }
    let mut u = DMatrix::zeros(n, n);
    let mut v = DMatrix::zeros(n, n);
    for (k, p) in powers.iter().enumerate() {
        if 2 * k + 1 < b.len() {
            u += p * b[2 * k + 1];
        }
        v += p * b[2 * k];
    }
    let u = a * u;
    solve_pade(u, v)
}

fn pade_13(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let b = &PADE_13;
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u = a * (&a6 * inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1]);
    let inner_v = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
    solve_pade(u, v)
}

/// Solves `(V - U) X = V + U`.
fn solve_pade(u: DMatrix<f64>, v: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = &v + &u;
    let q = v - u;
    q.lu().solve(&p).ok_or(Error::Singular("Padé denominator"))
}
