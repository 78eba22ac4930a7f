//! Serial third-order masked HLA.

use crate::batch::{KernelConfig, OutputBatch, TokenBatch};
use crate::error::{HlaError, Result};
use crate::matrix::{decay_axpy, dot, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct State3 {
    pub sk: Matrix,
    pub sq: Matrix,
    pub p: Matrix,
    pub mk: Vec<f64>,
    pub g1: Matrix,
    pub g2: Matrix,
    pub g3: Matrix,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub h3: Vec<f64>,
}

impl State3 {
    pub fn new(d: usize, d_v: usize) -> Self {
        State3 {
            sk: Matrix::zeros(d, d),
            sq: Matrix::zeros(d, d),
            p: Matrix::zeros(d, d_v),
            mk: vec![0.0; d],
            g1: Matrix::zeros(d, d_v),
            g2: Matrix::zeros(d, d_v),
            g3: Matrix::zeros(d, d_v),
            h1: vec![0.0; d],
            h2: vec![0.0; d],
            h3: vec![0.0; d],
        }
    }

    pub fn d(&self) -> usize {
        self.sk.rows()
    }

    pub fn d_v(&self) -> usize {
        self.p.cols()
    }

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

    /// Cross-summaries use the previous `SK`, `SQ`, `P`, `mK`; every update
    /// is a mat-vec or an outer product.
    pub(crate) fn step_unchecked(&mut self, q: &[f64], k: &[f64], v: &[f64], gamma: f64) {
        // Everything read from the previous state is gathered before the
        // first-order summaries move.
        let u1 = self.sq.mul_vec(k);
        let u1p = self.p.vec_mul(&u1);
        let u1m = dot(&u1, &self.mk);
        let a2 = self.sk.mul_vec(q);
        let qp = self.p.vec_mul(q);
        let qm = dot(q, &self.mk);
        let a3 = self.sk.mul_vec(&u1);

        self.sk.decay_add_outer(gamma, k, k);
        self.sq.decay_add_outer(gamma, q, q);
        self.p.decay_add_outer(gamma, k, v);
        decay_axpy(gamma, 1.0, k, &mut self.mk);

        self.g1.decay_add_outer(gamma, k, &u1p);
        decay_axpy(gamma, u1m, k, &mut self.h1);
        self.g2.decay_add_outer(gamma, &a2, &qp);
        decay_axpy(gamma, qm, &a2, &mut self.h2);
        self.g3.decay_add_outer(gamma, &a3, v);
        decay_axpy(gamma, 1.0, &a3, &mut self.h3);
    }

    /// `num = (SQ (SK q))^T P - q^T (G1 + G2 + G3)`,
    /// `den = q^T (SK (SQ mK) - h1 - h2 - h3)`.
    pub fn output(&self, q: &[f64]) -> (Vec<f64>, f64) {
        let y = self.sk.mul_vec(q);
        let z = self.sq.mul_vec(&y);
        let mut num = self.p.vec_mul(&z);
        for g in [&self.g1, &self.g2, &self.g3] {
            let term = g.vec_mul(q);
            num.iter_mut().zip(&term).for_each(|(x, t)| *x -= t);
        }
        let sqm = self.sq.mul_vec(&self.mk);
        let mut denvec = self.sk.mul_vec(&sqm);
        for h in [&self.h1, &self.h2, &self.h3] {
            denvec.iter_mut().zip(h).for_each(|(x, y)| *x -= y);
        }
        (num, dot(q, &denvec))
    }
}

pub fn hla3_forward(batch: &TokenBatch, cfg: &KernelConfig) -> Result<OutputBatch> {
    cfg.validate_masked("hla3", false)?;
    let (n, d, dv) = (batch.len(), batch.d(), batch.d_v());
    let mut state = State3::new(d, dv);
    let mut o = Matrix::zeros(n, dv);
    let mut den = Vec::with_capacity(n);
    for t in 0..n {
        let (q, k, v) = batch.token(t);
        state.step_unchecked(q, k, v, cfg.gamma);
        let (num, dt) = state.output(q);
        let row = o.row_mut(t);
        row.copy_from_slice(&num);
        cfg.finish_row(t, row, dt)?;
        den.push(dt);
    }
    Ok(OutputBatch { o, den: Some(den) })
}
