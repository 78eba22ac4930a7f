//! Serial asymmetric second-order operator (the `A A V` cascade).

use crate::batch::{KernelConfig, OutputBatch, TokenBatch};
use crate::dd::{decay_axpy, dot, round_vec, Dd, DdMatrix};
use crate::error::{HlaError, Result};
use crate::hla2::assemble;

#[derive(Clone, Debug, PartialEq)]
pub struct StateA {
    /// Key–value accumulator `P^KV`.
    pub p: DdMatrix,
    /// Key mass `m^K`.
    pub m: Vec<Dd>,
    pub e: DdMatrix,
    pub nvec: Vec<Dd>,
}

impl StateA {
    pub fn new(d: usize, d_v: usize) -> Self {
        StateA {
            p: DdMatrix::zeros(d, d_v),
            m: vec![Dd::ZERO; d],
            e: DdMatrix::zeros(d, d_v),
            nvec: vec![Dd::ZERO; d],
        }
    }

    pub fn d(&self) -> usize {
        self.p.rows()
    }

    pub fn d_v(&self) -> usize {
        self.p.cols()
    }

    /// `E` and `n` route through the post-update (inclusive) `P` and `m`.
    pub fn step(&mut self, q: &[f64], k: &[f64], v: &[f64], gamma: f64) -> Result<()> {
        if q.len() != self.d() || k.len() != self.d() || v.len() != self.d_v() {
            return Err(HlaError::ShapeMismatch(format!(
                "token (q:{}, k:{}, v:{}) for state (d:{}, d_v:{})",
                q.len(),
                k.len(),
                v.len(),
                self.d(),
                self.d_v()
            )));
        }
        self.step_unchecked(q, k, v, gamma);
        Ok(())
    }

    #[inline]
    pub(crate) fn step_unchecked(&mut self, q: &[f64], k: &[f64], v: &[f64], gamma: f64) {
        self.p.decay_add_outer(gamma, k, v);
        decay_axpy(gamma, 1.0, k, &mut self.m);
        let r = self.p.vec_mul(q);
        let s = dot(q, &self.m);
        self.e.decay_add_outer(gamma, k, &r);
        decay_axpy(gamma, s, k, &mut self.nvec);
    }

    pub(crate) fn output_wide(&self, q: &[f64]) -> (Vec<Dd>, Dd) {
        (self.e.vec_mul(q), dot(q, &self.nvec))
    }

    /// `(q^T E, q^T n)`.
    pub fn output(&self, q: &[f64]) -> (Vec<f64>, f64) {
        let (num, den) = self.output_wide(q);
        (round_vec(&num), den.to_f64())
    }
}

pub fn ahla_forward(batch: &TokenBatch, cfg: &KernelConfig) -> Result<OutputBatch> {
    cfg.validate_masked("ahla", false)?;
    let mut state = StateA::new(batch.d(), batch.d_v());
    let rows = (0..batch.len()).map(|t| {
        let (q, k, v) = batch.token(t);
        state.step_unchecked(q, k, v, cfg.gamma);
        state.output(q)
    });
    assemble(rows, batch.d_v(), cfg)
}
