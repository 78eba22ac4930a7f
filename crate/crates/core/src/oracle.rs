//! Brute-force references. Each oracle materializes the masked affinity
//! matrix (or walks explicit index sums) and never touches a recurrence.
//! They are defined only at `gamma = 1`, `lambda = 0`.

use crate::batch::{KernelConfig, OutputBatch, TokenBatch};
use crate::dd::{dot as dd_dot, round_vec, Dd, DdMatrix};
use crate::error::{HlaError, Result};
use crate::hla2::assemble;
use crate::matrix::{dot, Matrix};

/// Default sequence-length cap for the O(n^4 d) third-order oracle.
pub const HLA3_ORACLE_CAP: usize = 32;

/// `W = L ⊙ (Q K^T)`: `W[t][j] = q_t·k_j` for `j <= t`, zero above the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedAffinity(Matrix);

impl MaskedAffinity {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

fn check_pair(q: &Matrix, k: &Matrix) -> Result<()> {
    if q.cols() != k.cols() || q.rows() != k.rows() {
        return Err(HlaError::ShapeMismatch(format!(
            "Q is {:?} but K is {:?}",
            q.shape(),
            k.shape()
        )));
    }
    Ok(())
}

/// Unrounded masked affinity.
fn affinity_wide(q: &Matrix, k: &Matrix) -> Result<DdMatrix> {
    check_pair(q, k)?;
    let n = q.rows();
    let mut w = DdMatrix::zeros(n, n);
    for t in 0..n {
        for j in 0..=t {
            w[(t, j)] = dd_dot(q.row(t), k.row(j));
        }
    }
    Ok(w)
}

pub fn affinity_masked(q: &Matrix, k: &Matrix) -> Result<MaskedAffinity> {
    Ok(MaskedAffinity(affinity_wide(q, k)?.round()))
}

/// `((W W^T) ⊙ L)[t][i] = Σ_{j<=i} W[t][j] W[i][j]` for `i <= t`.
fn hla2_weights(batch: &TokenBatch) -> Result<DdMatrix> {
    let w = affinity_wide(batch.q(), batch.k())?;
    let n = batch.len();
    let mut out = DdMatrix::zeros(n, n);
    for t in 0..n {
        for i in 0..=t {
            out[(t, i)] = w.row(t)[..=i]
                .iter()
                .zip(&w.row(i)[..=i])
                .map(|(&a, &b)| a * b)
                .sum();
        }
    }
    Ok(out)
}

/// Applies a masked weight matrix to `V` and to the ones vector.
fn apply_weights(weights: &DdMatrix, v: &Matrix, cfg: &KernelConfig) -> Result<OutputBatch> {
    let rows = (0..weights.rows()).map(|t| {
        let mut acc = vec![Dd::ZERO; v.cols()];
        for (i, &wt) in weights.row(t)[..=t].iter().enumerate() {
            acc.iter_mut()
                .zip(v.row(i))
                .for_each(|(a, &x)| *a += wt * x);
        }
        (
            round_vec(&acc),
            weights.row(t).iter().copied().sum::<Dd>().to_f64(),
        )
    });
    assemble(rows, v.cols(), cfg)
}

/// Masked second order: rows of `((W W^T) ⊙ L) V`.
pub fn oracle_hla2(batch: &TokenBatch, cfg: &KernelConfig) -> Result<OutputBatch> {
    cfg.require_exact_form()?;
    apply_weights(&hla2_weights(batch)?, batch.v(), cfg)
}

/// Value-path adjoint of the unnormalized masked second order,
/// `((W W^T) ⊙ L)^T dO`.
pub fn oracle_hla2_value_adjoint(batch: &TokenBatch, d_out: &Matrix) -> Result<Matrix> {
    if d_out.shape() != (batch.len(), batch.d_v()) {
        return Err(HlaError::ShapeMismatch(format!(
            "cotangent is {:?}, expected {}x{}",
            d_out.shape(),
            batch.len(),
            batch.d_v()
        )));
    }
    let weights = hla2_weights(batch)?;
    let n = batch.len();
    let mut out = DdMatrix::zeros(n, batch.d_v());
    for t in 0..n {
        for i in 0..=t {
            let wt = weights[(t, i)];
            out.row_mut(i)
                .iter_mut()
                .zip(d_out.row(t))
                .for_each(|(a, &g)| *a += wt * g);
        }
    }
    Ok(out.round())
}

/// Masked asymmetric second order: rows of `((W W) ⊙ L) V`, where
/// `(W W)[t][i] = Σ_{i<=j<=t} W[t][j] W[j][i]`.
pub fn oracle_ahla(batch: &TokenBatch, cfg: &KernelConfig) -> Result<OutputBatch> {
    cfg.require_exact_form()?;
    let w = affinity_wide(batch.q(), batch.k())?;
    let n = batch.len();
    let mut weights = DdMatrix::zeros(n, n);
    for t in 0..n {
        for i in 0..=t {
            weights[(t, i)] = (i..=t).map(|j| w[(t, j)] * w[(j, i)]).sum();
        }
    }
    apply_weights(&weights, batch.v(), cfg)
}

/// Unmasked second order `q_t^T S_t C_t` from definitional prefix sums.
///
/// With `cfg.metric_override = Some(M)`, `M` replaces `S_t`.
pub fn oracle_hla2_unmasked(batch: &TokenBatch, cfg: &KernelConfig) -> Result<OutputBatch> {
    cfg.require_exact_form()?;
    let (n, d, dv) = (batch.len(), batch.d(), batch.d_v());
    let metric = match &cfg.metric_override {
        Some(m) if m.shape() != (d, d) => {
            return Err(HlaError::ShapeMismatch(format!(
                "metric is {:?}, expected {d}x{d}",
                m.shape()
            )));
        }
        Some(m) => Some(DdMatrix::from_matrix(m)),
        None => None,
    };
    let rows = (0..n).map(|t| {
        let mut s = DdMatrix::zeros(d, d);
        let mut c = DdMatrix::zeros(d, dv);
        let mut mq = vec![Dd::ZERO; d];
        for i in 0..=t {
            let (qi, ki, vi) = batch.token(i);
            for a in 0..d {
                for b in 0..d {
                    s[(a, b)] += Dd::prod(ki[a], ki[b]);
                }
                for b in 0..dv {
                    c[(a, b)] += Dd::prod(qi[a], vi[b]);
                }
                mq[a] += Dd::new(qi[a]);
            }
        }
        let u = metric.as_ref().unwrap_or(&s).vec_mul(batch.q().row(t));
        (round_vec(&c.vec_mul(&u)), dd_dot(&u, &mq).to_f64())
    });
    assemble(rows, dv, cfg)
}

/// Masked third order by explicit triple sums.
pub fn oracle_hla3(batch: &TokenBatch, cfg: &KernelConfig) -> Result<OutputBatch> {
    oracle_hla3_with_cap(batch, cfg, HLA3_ORACLE_CAP)
}

/// Row `t` sums `(q_t·k_i)(q_u·k_i)(q_u·k_j) v_j` over `i, u, j <= t`, keeping
/// only triples whose largest index occurs at least twice. This equals the
/// full sum minus the three strict-maximum sets `{i > max(u,j)}`,
/// `{u > max(i,j)}` and `{j > max(i,u)}`.
pub fn oracle_hla3_with_cap(
    batch: &TokenBatch,
    cfg: &KernelConfig,
    cap: usize,
) -> Result<OutputBatch> {
    cfg.require_exact_form()?;
    let n = batch.len();
    if n > cap {
        return Err(HlaError::CapExceeded { n, cap });
    }
    let dv = batch.d_v();
    let mut a = Matrix::zeros(n, n);
    for t in 0..n {
        for i in 0..n {
            a[(t, i)] = dot(batch.q().row(t), batch.k().row(i));
        }
    }
    let mut o = Matrix::zeros(n, dv);
    let mut den = vec![0.0; n];
    for t in 0..n {
        let mut acc = vec![0.0; dv];
        let mut mass = 0.0;
        for i in 0..=t {
            for u in 0..=t {
                let left = a[(t, i)] * a[(u, i)];
                for j in 0..=t {
                    let top = i.max(u).max(j);
                    let hits = (i == top) as u8 + (u == top) as u8 + (j == top) as u8;
                    if hits < 2 {
                        continue;
                    }
                    let w = left * a[(u, j)];
                    mass += w;
                    for (x, &vj) in acc.iter_mut().zip(batch.v().row(j)) {
                        *x += w * vj;
                    }
                }
            }
        }
        o.row_mut(t).copy_from_slice(&acc);
        den[t] = mass;
        cfg.finish_row(t, o.row_mut(t), mass)?;
    }
    Ok(OutputBatch { o, den: Some(den) })
}

/// Both sides of `(Q K^T)(Q K^T)^T = Q (K^T K) Q^T`, each evaluated in its
/// own association order.
pub fn oracle_t2_factorization(q: &Matrix, k: &Matrix) -> Result<(Matrix, Matrix)> {
    if q.cols() != k.cols() {
        return Err(HlaError::ShapeMismatch(format!(
            "Q has {} columns but K has {}",
            q.cols(),
            k.cols()
        )));
    }
    let (wq, wk) = (DdMatrix::from_matrix(q), DdMatrix::from_matrix(k));
    let a = wq.matmul(&wk.transpose());
    let lhs = a.matmul(&a.transpose());
    let rhs = wq
        .matmul(&wk.transpose().matmul(&wk))
        .matmul(&wq.transpose());
    Ok((lhs.round(), rhs.round()))
}

/// Causal linear attention with the identity feature map:
/// `o_t = Σ_{i<=t} (q_t·k_i) v_i`, `den_t = Σ_{i<=t} q_t·k_i`.
pub fn linear_attention_identity(batch: &TokenBatch, cfg: &KernelConfig) -> Result<OutputBatch> {
    cfg.validate()?;
    apply_weights(&affinity_wide(batch.q(), batch.k())?, batch.v(), cfg)
}
