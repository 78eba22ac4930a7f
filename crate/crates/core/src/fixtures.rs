//! Fixed instances and batch transforms used by tests and the check suites.

use crate::batch::TokenBatch;
use crate::matrix::Matrix;

/// The worked instance W1: `n = 2`, `d = d_v = 1`, `Q = (1, 2)`,
/// `K = (1, 1)`, `V = (1, 3)`.
pub fn w1() -> TokenBatch {
    let col = |a: f64, b: f64| Matrix::from_vec(2, 1, vec![a, b]).unwrap();
    TokenBatch::new(col(1.0, 2.0), col(1.0, 1.0), col(1.0, 3.0)).unwrap()
}

/// Tokens `0..keep` from `prefix`, the rest from `suffix`.
pub fn splice(prefix: &TokenBatch, suffix: &TokenBatch, keep: usize) -> TokenBatch {
    assert_eq!(prefix.len(), suffix.len());
    let mix = |a: &Matrix, b: &Matrix| {
        let mut out = b.clone();
        for t in 0..keep.min(a.rows()) {
            out.row_mut(t).copy_from_slice(a.row(t));
        }
        out
    };
    TokenBatch::new(
        mix(prefix.q(), suffix.q()),
        mix(prefix.k(), suffix.k()),
        mix(prefix.v(), suffix.v()),
    )
    .unwrap()
}

/// Scales Q (`which = 0`), K (`1`) or V (`2`) by `alpha`.
pub fn scale_input(batch: &TokenBatch, which: usize, alpha: f64) -> TokenBatch {
    let pick = |i: usize, m: &Matrix| {
        if i == which {
            m.scaled(alpha)
        } else {
            m.clone()
        }
    };
    TokenBatch::new(pick(0, batch.q()), pick(1, batch.k()), pick(2, batch.v())).unwrap()
}

/// Ties keys to queries (`K := Q`).
pub fn tie_keys(batch: &TokenBatch) -> TokenBatch {
    TokenBatch::new(batch.q().clone(), batch.q().clone(), batch.v().clone()).unwrap()
}
