//! Fixed workloads shared by the criterion benches.

use hla_core::{gauss_tokens, TokenBatch};

/// Head sizes used throughout: `d = d_v = 64`.
pub const HEAD: usize = 64;

/// Gaussian batch of length `n` at the default head size, entries scaled by `1/sqrt(d)`.
pub fn workload(n: usize) -> TokenBatch {
    workload_with(n, HEAD, HEAD)
}

pub fn workload_with(n: usize, d: usize, dv: usize) -> TokenBatch {
    gauss_tokens(0xBE4C, n, d, dv, 1.0 / (d as f64).sqrt()).expect("valid workload shape")
}
