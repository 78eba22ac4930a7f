//! Inputs, configuration and outputs shared by every kernel.

use crate::error::{HlaError, Result};
use crate::matrix::Matrix;

/// One head's `(Q, K, V)` sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    q: Matrix,
    k: Matrix,
    v: Matrix,
}

impl TokenBatch {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<Self> {
        if q.rows() != k.rows() || q.rows() != v.rows() {
            return Err(HlaError::shape(format!(
                "row counts differ: Q has {}, K has {}, V has {}",
                q.rows(),
                k.rows(),
                v.rows()
            )));
        }
        if q.cols() != k.cols() {
            return Err(HlaError::shape(format!(
                "Q has {} columns but K has {}",
                q.cols(),
                k.cols()
            )));
        }
        if q.cols() == 0 || v.cols() == 0 {
            return Err(HlaError::InvalidDimensions("d and d_v must be >= 1".into()));
        }
        Ok(TokenBatch { q, k, v })
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn k(&self) -> &Matrix {
        &self.k
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Query/key dimension.
    pub fn d(&self) -> usize {
        self.q.cols()
    }

    pub fn d_v(&self) -> usize {
        self.v.cols()
    }

    pub fn into_parts(self) -> (Matrix, Matrix, Matrix) {
        (self.q, self.k, self.v)
    }

    /// Token `t` as `(q_t, k_t, v_t)` row slices.
    #[inline]
    pub fn token(&self, t: usize) -> (&[f64], &[f64], &[f64]) {
        (self.q.row(t), self.k.row(t), self.v.row(t))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelConfig {
    /// Decay in `(0, 1]`; `1.0` means no decay.
    pub gamma: f64,
    /// Added to the masked denominator when normalizing.
    pub eps: f64,
    /// Ridge added to the key metric (second order only).
    pub lambda: f64,
    pub normalize: bool,
    pub chunk_width: usize,
    /// Replaces `S + lambda I` in the unmasked second-order readout.
    pub metric_override: Option<Matrix>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            gamma: 1.0,
            eps: 1e-6,
            lambda: 0.0,
            normalize: false,
            chunk_width: 64,
            metric_override: None,
        }
    }
}

impl KernelConfig {
    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_normalize(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn with_chunk_width(mut self, w: usize) -> Self {
        self.chunk_width = w;
        self
    }

    pub fn with_metric_override(mut self, metric: Matrix) -> Self {
        self.metric_override = Some(metric);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(HlaError::InvalidConfig(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(HlaError::InvalidConfig(format!(
                "eps must be >= 0, got {}",
                self.eps
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(HlaError::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.chunk_width == 0 {
            return Err(HlaError::InvalidConfig("chunk_width must be >= 1".into()));
        }
        Ok(())
    }

    /// Validation for kernels that only accept the plain masked form.
    pub(crate) fn validate_masked(&self, kernel: &str, ridge_allowed: bool) -> Result<()> {
        self.validate()?;
        if !ridge_allowed && self.lambda != 0.0 {
            return Err(HlaError::InvalidConfig(format!(
                "ridge lambda is undefined for {kernel}"
            )));
        }
        if self.metric_override.is_some() {
            return Err(HlaError::InvalidConfig(format!(
                "metric_override applies only to unmasked second order, not {kernel}"
            )));
        }
        Ok(())
    }

    /// Oracles are defined only without decay and ridge.
    pub(crate) fn require_exact_form(&self) -> Result<()> {
        self.validate()?;
        if self.gamma != 1.0 || self.lambda != 0.0 {
            return Err(HlaError::OracleUndefined);
        }
        Ok(())
    }

    /// Applies the optional normalization to one output row.
    #[inline]
    pub(crate) fn finish_row(&self, t: usize, num: &mut [f64], den: f64) -> Result<()> {
        if self.normalize {
            let scale = den + self.eps;
            if scale.abs() < 1e-300 {
                return Err(HlaError::DegenerateDenominator { t });
            }
            num.iter_mut().for_each(|x| *x /= scale);
        }
        Ok(())
    }
}

/// Per-token outputs and (optionally) the masked denominators.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputBatch {
    pub o: Matrix,
    pub den: Option<Vec<f64>>,
}

impl OutputBatch {
    pub fn len(&self) -> usize {
        self.o.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.o.rows() == 0
    }

    /// Denominators as an `n x 1` matrix, for writing to disk.
    pub fn den_matrix(&self) -> Option<Matrix> {
        self.den
            .as_ref()
            .map(|d| Matrix::from_vec(d.len(), 1, d.clone()).expect("finite denominators"))
    }
}
