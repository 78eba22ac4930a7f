//! Reverse-mode pass for the serial masked second-order kernel.
//!
//! The loss is `L = Σ_t dO_t · O_t` with `O = hla2_forward(batch, cfg)`.
//! States are checkpointed every `cfg.chunk_width` tokens; the backward sweep
//! recomputes one chunk of states at a time and walks it in reverse.
//! `eps` is treated as a constant.

use crate::batch::{KernelConfig, TokenBatch};
use crate::dd::{axpy, dot, round_vec, widen_vec, Dd, DdMatrix};
use crate::error::{HlaError, Result};
use crate::hla2::{hla2_readouts_wide, State2};
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct GradTriple {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
}

impl GradTriple {
    fn zeros(n: usize, d: usize, d_v: usize) -> Self {
        GradTriple {
            dq: Matrix::zeros(n, d),
            dk: Matrix::zeros(n, d),
            dv: Matrix::zeros(n, d_v),
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        GradTriple {
            dq: self.dq.scaled(alpha),
            dk: self.dk.scaled(alpha),
            dv: self.dv.scaled(alpha),
        }
    }
}

fn check_cotangent(batch: &TokenBatch, d_out: &Matrix) -> Result<()> {
    if d_out.shape() != (batch.len(), batch.d_v()) {
        return Err(HlaError::ShapeMismatch(format!(
            "cotangent is {:?}, expected {}x{}",
            d_out.shape(),
            batch.len(),
            batch.d_v()
        )));
    }
    Ok(())
}

/// `den + eps`, rejecting the same denominators the forward rejects.
fn normalizer(t: usize, den: Dd, eps: f64) -> Result<Dd> {
    let scale = den + eps;
    if scale.to_f64().abs() < 1e-300 {
        return Err(HlaError::DegenerateDenominator { t });
    }
    Ok(scale)
}

/// Exact gradient of `Σ dO ⊙ hla2_forward(batch, cfg)` w.r.t. `Q`, `K`, `V`.
pub fn hla2_backward(batch: &TokenBatch, cfg: &KernelConfig, d_out: &Matrix) -> Result<GradTriple> {
    cfg.validate_masked("hla2", true)?;
    check_cotangent(batch, d_out)?;
    let (n, d, dv) = (batch.len(), batch.d(), batch.d_v());
    let gamma = cfg.gamma;
    let w = cfg.chunk_width;

    // Forward sweep keeping the state at the start of every chunk.
    let mut checkpoints = Vec::with_capacity(n.div_ceil(w));
    let mut state = State2::new(d, dv);
    for t in 0..n {
        if t % w == 0 {
            checkpoints.push(state.clone());
        }
        let (q, k, v) = batch.token(t);
        state.step_unchecked(q, k, v, gamma);
    }

    let mut grads = GradTriple::zeros(n, d, dv);
    // Adjoints of the state after token t.
    let mut ds = DdMatrix::zeros(d, d);
    let mut dc = DdMatrix::zeros(d, dv);
    let mut dm = vec![Dd::ZERO; d];
    let mut dg = DdMatrix::zeros(d, dv);
    let mut dh = vec![Dd::ZERO; d];

    for (chunk, start) in checkpoints.iter().zip((0..n).step_by(w)).rev() {
        let end = (start + w).min(n);
        // states[i] is the state before token start + i; the last entry is after `end - 1`.
        let mut states = Vec::with_capacity(end - start + 1);
        states.push(chunk.clone());
        for t in start..end {
            let mut next = states.last().unwrap().clone();
            let (q, k, v) = batch.token(t);
            next.step_unchecked(q, k, v, gamma);
            states.push(next);
        }

        for t in (start..end).rev() {
            let (q, k, v) = batch.token(t);
            let prev = &states[t - start];
            let cur = &states[t - start + 1];

            // Output adjoints.
            let u = cur.metric_row(q, cfg.lambda);
            let (num, den) = cur.output_wide(q, cfg.lambda);
            let g_out = d_out.row(t);
            let (dnum, dden): (Vec<Dd>, Dd) = if cfg.normalize {
                let scale = normalizer(t, den, cfg.eps)?;
                let dnum = g_out.iter().map(|&x| Dd::new(x) / scale).collect();
                (dnum, -(dot(g_out, &num) / (scale * scale)))
            } else {
                (widen_vec(g_out), Dd::ZERO)
            };

            let mut gq = vec![Dd::ZERO; d];
            let mut gk = vec![Dd::ZERO; d];
            let mut gv = vec![Dd::ZERO; dv];

            // num = u C - q^T G ; den = u m - q^T h
            let mut du = cur.c.mul_vec(&dnum);
            axpy(dden, &cur.m, &mut du);
            dc.decay_add_outer(1.0, &u, &dnum);
            axpy(dden, &u, &mut dm);
            let neg_dnum: Vec<Dd> = dnum.iter().map(|&x| -x).collect();
            dg.decay_add_outer(1.0, q, &neg_dnum);
            axpy(-dden, q, &mut dh);
            axpy(-1.0, &cur.g.mul_vec(&dnum), &mut gq);
            axpy(-dden, &cur.h, &mut gq);
            // u = S^T q + lambda q
            axpy(1.0, &cur.s.mul_vec(&du), &mut gq);
            axpy(cfg.lambda, &du, &mut gq);
            ds.decay_add_outer(1.0, q, &du);

            // Step adjoints, in reverse of the forward update order.
            // m_t = gamma m_{t-1} + q
            axpy(1.0, &dm, &mut gq);
            // C_t = gamma C_{t-1} + q v^T
            axpy(1.0, &dc.mul_vec(v), &mut gq);
            axpy(1.0, &dc.vec_mul(q), &mut gv);
            // S_t = gamma S_{t-1} + k k^T
            axpy(1.0, &ds.mul_vec(k), &mut gk);
            axpy(1.0, &ds.vec_mul(k), &mut gk);
            // h_t = gamma h_{t-1} + k (k . m_{t-1})
            let km = dot(k, &prev.m);
            axpy(km, &dh, &mut gk);
            let dkm = dot(k, &dh);
            axpy(dkm, &prev.m, &mut gk);
            // G_t = gamma G_{t-1} + k (k^T C_{t-1})
            let kc = prev.c.vec_mul(k);
            axpy(1.0, &dg.mul_vec(&kc), &mut gk);
            let dkc = dg.vec_mul(k);
            axpy(1.0, &prev.c.mul_vec(&dkc), &mut gk);

            // Carry adjoints back to the state before token t.
            ds.scale_in_place(gamma);
            dc.decay_add_outer(gamma, k, &dkc);
            crate::dd::decay_axpy(gamma, dkm, k, &mut dm);
            dg.scale_in_place(gamma);
            dh.iter_mut().for_each(|x| *x = x.mul_f64(gamma));

            grads.dq.row_mut(t).copy_from_slice(&round_vec(&gq));
            grads.dk.row_mut(t).copy_from_slice(&round_vec(&gk));
            grads.dv.row_mut(t).copy_from_slice(&round_vec(&gv));
        }
    }
    Ok(grads)
}

/// The loss, accumulated without intermediate rounding so the difference
/// quotient below is not swamped by cancellation in `L`.
fn loss(batch: &TokenBatch, cfg: &KernelConfig, d_out: &Matrix) -> Result<Dd> {
    let mut total = Dd::ZERO;
    for (t, (num, den)) in hla2_readouts_wide(batch, cfg)?.into_iter().enumerate() {
        let row = dot(d_out.row(t), &num);
        total += if cfg.normalize {
            row / normalizer(t, den, cfg.eps)?
        } else {
            row
        };
    }
    Ok(total)
}

/// Central finite differences of the same loss, with per-coordinate step
/// `step * max(1, |x|)`.
pub fn fd_gradient(
    batch: &TokenBatch,
    cfg: &KernelConfig,
    d_out: &Matrix,
    step: f64,
) -> Result<GradTriple> {
    if step.is_nan() || step <= 0.0 {
        return Err(HlaError::InvalidConfig(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    check_cotangent(batch, d_out)?;
    let mut parts = [batch.q().clone(), batch.k().clone(), batch.v().clone()];
    let mut out = Vec::with_capacity(3);
    for which in 0..3 {
        let mut grad = Matrix::zeros(parts[which].rows(), parts[which].cols());
        for idx in 0..parts[which].as_slice().len() {
            let x = parts[which].as_slice()[idx];
            let h = step * x.abs().max(1.0);
            let (up, down) = (x + h, x - h);
            let eval = |value: f64, parts: &mut [Matrix; 3]| -> Result<Dd> {
                parts[which].as_mut_slice()[idx] = value;
                let b = TokenBatch::new(parts[0].clone(), parts[1].clone(), parts[2].clone())?;
                loss(&b, cfg, d_out)
            };
            let plus = eval(up, &mut parts)?;
            let minus = eval(down, &mut parts)?;
            parts[which].as_mut_slice()[idx] = x;
            // Divide by the step actually taken, (x + h) - (x - h), not 2h.
            grad.as_mut_slice()[idx] = ((plus - minus) / (Dd::new(up) - Dd::new(down))).to_f64();
        }
        out.push(grad);
    }
    let dv = out.pop().unwrap();
    let dk = out.pop().unwrap();
    let dq = out.pop().unwrap();
    Ok(GradTriple { dq, dk, dv })
}
