//! Deterministic data generation: SplitMix64 and a Box–Muller normal stream.

use crate::batch::TokenBatch;
use crate::error::{HlaError, Result};
use crate::matrix::Matrix;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

/// One SplitMix64 step: returns `(new_state, output)`.
#[inline]
pub fn splitmix64_next(state: u64) -> (u64, u64) {
    let new_state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = new_state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (new_state, z ^ (z >> 31))
}

#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        let (s, out) = splitmix64_next(self.state);
        self.state = s;
        out
    }

    /// Uniform in (0, 1): 53 high bits, with 0 remapped to 2^-53.
    pub fn next_open01(&mut self) -> f64 {
        let u = (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53;
        if u == 0.0 {
            TWO_POW_NEG_53
        } else {
            u
        }
    }

    /// Uniform integer in `lo..=hi`. Modulo bias is irrelevant at the ranges
    /// used for instance sampling.
    pub fn next_range(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        lo + (self.next_u64() % (hi - lo + 1) as u64) as usize
    }
}

/// Standard normals in pairs via Box–Muller; the sine half is cached.
#[derive(Clone, Debug)]
pub struct GaussStream {
    rng: SplitMix64,
    spare: Option<f64>,
}

impl GaussStream {
    pub fn new(seed: u64) -> Self {
        GaussStream {
            rng: SplitMix64::new(seed),
            spare: None,
        }
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.rng.next_open01();
        let u2 = self.rng.next_open01();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    fn fill(&mut self, rows: usize, cols: usize, scale: f64) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for x in m.as_mut_slice() {
            *x = self.next_normal() * scale;
        }
        m
    }
}

/// Gaussian `(Q, K, V)` with entries `N(0,1) * scale`, drawn Q then K then V
/// from one stream in row-major order.
pub fn gauss_tokens(seed: u64, n: usize, d: usize, d_v: usize, scale: f64) -> Result<TokenBatch> {
    if d == 0 || d_v == 0 {
        return Err(HlaError::InvalidDimensions(format!(
            "d={d}, d_v={d_v}; both must be >= 1"
        )));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(HlaError::InvalidDimensions(format!(
            "scale must be positive, got {scale}"
        )));
    }
    let mut g = GaussStream::new(seed);
    let q = g.fill(n, d, scale);
    let k = g.fill(n, d, scale);
    let v = g.fill(n, d_v, scale);
    TokenBatch::new(q, k, v)
}
