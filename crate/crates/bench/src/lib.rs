//! Parameter fixtures shared by the criterion benchmarks.

use netgrowth::{DMatrix, DVector, ModelParams, NetWorthVector};

/// `n` firms on a ring, each selling to both neighbours, with a stable
/// mean (every firm spends what it earns).
pub fn ring_network(n: usize) -> (ModelParams, NetWorthVector) {
    let phi = DMatrix::from_fn(n, n, |i, j| {
        let d = (i + n - j) % n;
        if n > 1 && (d == 1 || d == n - 1) {
            0.002
        } else {
            0.0
        }
    });
    let lambda = DVector::from_fn(n, |i, _| phi.column(i).sum());
    let params = ModelParams::new(phi, lambda).expect("ring parameters are valid");
    (params, NetWorthVector::initial(&vec![10.0; n]))
}
