//! Serial second-order HLA.
//!
//! The masked state carries the key moment `S`, the query–value accumulator
//! `C`, the query mass `m`, and the cross-summaries `G`, `h` that remove the
//! acausal part of `S_t C_t`.

use crate::batch::{KernelConfig, OutputBatch, TokenBatch};
use crate::dd::{axpy, decay_axpy, dot, round_vec, Dd, DdMatrix};
use crate::error::{HlaError, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct State2 {
    pub s: DdMatrix,
    pub c: DdMatrix,
    pub m: Vec<Dd>,
    pub g: DdMatrix,
    pub h: Vec<Dd>,
}

impl State2 {
    pub fn new(d: usize, d_v: usize) -> Self {
        State2 {
            s: DdMatrix::zeros(d, d),
            c: DdMatrix::zeros(d, d_v),
            m: vec![Dd::ZERO; d],
            g: DdMatrix::zeros(d, d_v),
            h: vec![Dd::ZERO; d],
        }
    }

    pub fn d(&self) -> usize {
        self.s.rows()
    }

    pub fn d_v(&self) -> usize {
        self.c.cols()
    }

    fn check_token(&self, q: &[f64], k: &[f64], v: &[f64]) -> Result<()> {
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
        Ok(())
    }

    /// Advances by one token. `G` and `h` read `C` and `m` before they are
    /// updated; reordering breaks the masked identity.
    pub fn step(&mut self, q: &[f64], k: &[f64], v: &[f64], gamma: f64) -> Result<()> {
        self.check_token(q, k, v)?;
        self.step_unchecked(q, k, v, gamma);
        Ok(())
    }

    #[inline]
    pub(crate) fn step_unchecked(&mut self, q: &[f64], k: &[f64], v: &[f64], gamma: f64) {
        let kc = self.c.vec_mul(k);
        self.g.decay_add_outer(gamma, k, &kc);
        let km = dot(k, &self.m);
        decay_axpy(gamma, km, k, &mut self.h);
        self.s.decay_add_outer(gamma, k, k);
        self.c.decay_add_outer(gamma, q, v);
        decay_axpy(gamma, 1.0, q, &mut self.m);
    }

    /// `u = q^T (S + lambda I)`.
    pub(crate) fn metric_row(&self, q: &[f64], lambda: f64) -> Vec<Dd> {
        let mut u = self.s.vec_mul(q);
        if lambda != 0.0 {
            axpy(lambda, q, &mut u);
        }
        u
    }

    /// Unrounded masked readout.
    pub(crate) fn output_wide(&self, q: &[f64], lambda: f64) -> (Vec<Dd>, Dd) {
        let u = self.metric_row(q, lambda);
        let mut num = self.c.vec_mul(&u);
        let qg = self.g.vec_mul(q);
        num.iter_mut().zip(qg).for_each(|(x, y)| *x -= y);
        let den = dot(&u, &self.m) - dot(q, &self.h);
        (num, den)
    }

    /// Masked readout `(num, den)` with `u = q^T (S + lambda I)`:
    /// `num = u C - q^T G`, `den = u m - q^T h`. The ridge touches only the
    /// `S` path.
    pub fn output(&self, q: &[f64], lambda: f64) -> (Vec<f64>, f64) {
        let (num, den) = self.output_wide(q, lambda);
        (round_vec(&num), den.to_f64())
    }
}

/// Unrounded `(num, den)` for every token.
pub(crate) fn hla2_readouts_wide(
    batch: &TokenBatch,
    cfg: &KernelConfig,
) -> Result<Vec<(Vec<Dd>, Dd)>> {
    cfg.validate_masked("hla2", true)?;
    let mut state = State2::new(batch.d(), batch.d_v());
    Ok((0..batch.len())
        .map(|t| {
            let (q, k, v) = batch.token(t);
            state.step_unchecked(q, k, v, cfg.gamma);
            state.output_wide(q, cfg.lambda)
        })
        .collect())
}

/// Rounds per-token readouts and applies the optional normalization.
pub(crate) fn assemble(
    readouts: impl ExactSizeIterator<Item = (Vec<f64>, f64)>,
    d_v: usize,
    cfg: &KernelConfig,
) -> Result<OutputBatch> {
    let mut o = Matrix::zeros(readouts.len(), d_v);
    let mut den = Vec::with_capacity(readouts.len());
    for (t, (num, dt)) in readouts.enumerate() {
        let row = o.row_mut(t);
        row.copy_from_slice(&num);
        cfg.finish_row(t, row, dt)?;
        den.push(dt);
    }
    Ok(OutputBatch { o, den: Some(den) })
}

/// Masked second-order forward pass, one token at a time.
pub fn hla2_forward(batch: &TokenBatch, cfg: &KernelConfig) -> Result<OutputBatch> {
    let rows = hla2_readouts_wide(batch, cfg)?;
    assemble(
        rows.into_iter()
            .map(|(num, den)| (round_vec(&num), den.to_f64())),
        batch.d_v(),
        cfg,
    )
}

/// Unmasked second order `q_t^T (S_t + lambda I) C_t`, or `q_t^T M C_t` when
/// `cfg.metric_override = Some(M)`. Only `S`, `C`, `m` are maintained.
pub fn hla2_unmasked_forward(batch: &TokenBatch, cfg: &KernelConfig) -> Result<OutputBatch> {
    cfg.validate()?;
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
    let mut s = DdMatrix::zeros(d, d);
    let mut c = DdMatrix::zeros(d, dv);
    let mut m = vec![Dd::ZERO; d];
    let mut rows = Vec::with_capacity(n);
    for t in 0..n {
        let (q, k, v) = batch.token(t);
        s.decay_add_outer(cfg.gamma, k, k);
        c.decay_add_outer(cfg.gamma, q, v);
        decay_axpy(cfg.gamma, 1.0, q, &mut m);
        let u = match &metric {
            Some(metric) => metric.vec_mul(q),
            None => {
                let mut u = s.vec_mul(q);
                axpy(cfg.lambda, q, &mut u);
                u
            }
        };
        rows.push((round_vec(&c.vec_mul(&u)), dot(&u, &m).to_f64()));
    }
    assemble(rows.into_iter(), dv, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{scale_input, splice, tie_keys, w1};
    use crate::metrics::max_rel_err;
    use crate::oracle::{linear_attention_identity, oracle_hla2, oracle_hla2_unmasked};
    use crate::rng::gauss_tokens;
    use proptest::prelude::*;

    #[test]
    fn init_shapes_and_zero_readout() {
        let s = State2::new(4, 8);
        assert_eq!(s.s.shape(), (4, 4));
        assert_eq!(s.c.shape(), (4, 8));
        assert_eq!(s.g.shape(), (4, 8));
        assert_eq!((s.m.len(), s.h.len()), (4, 4));
        let (num, den) = s.output(&[1.0, -2.0, 3.0, 0.5], 0.0);
        assert!(num.iter().all(|&x| x == 0.0));
        assert_eq!(den, 0.0);
    }

    fn fields(st: &State2) -> (f64, f64, f64, f64, f64) {
        (
            st.s[(0, 0)].to_f64(),
            st.c[(0, 0)].to_f64(),
            st.m[0].to_f64(),
            st.g[(0, 0)].to_f64(),
            st.h[0].to_f64(),
        )
    }

    #[test]
    fn w1_unroll() {
        let b = w1();
        let mut st = State2::new(1, 1);
        let (q, k, v) = b.token(0);
        st.step(q, k, v, 1.0).unwrap();
        assert_eq!(fields(&st), (1.0, 1.0, 1.0, 0.0, 0.0));

        let mut decayed = st.clone();
        let (q, k, v) = b.token(1);
        st.step(q, k, v, 1.0).unwrap();
        assert_eq!(fields(&st), (2.0, 7.0, 3.0, 1.0, 1.0));
        assert_eq!(st.output(q, 0.0), (vec![26.0], 10.0));
        assert_eq!(st.output(q, 1.0).0, vec![40.0]);

        decayed.step(q, k, v, 0.5).unwrap();
        assert_eq!(fields(&decayed), (1.5, 6.5, 2.5, 1.0, 1.0));
    }

    #[test]
    fn step_rejects_wrong_dims() {
        let mut st = State2::new(2, 1);
        assert!(matches!(
            st.step(&[1.0], &[1.0, 2.0], &[1.0], 1.0),
            Err(HlaError::ShapeMismatch(_))
        ));
        assert!(st.step(&[1.0, 0.0], &[1.0, 2.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn forward_w1() {
        let out = hla2_forward(&w1(), &KernelConfig::default()).unwrap();
        assert_eq!(out.o.as_slice(), &[1.0, 26.0]);
        assert_eq!(out.den.as_deref(), Some(&[1.0, 10.0][..]));

        let out = hla2_forward(&w1(), &KernelConfig::default().with_gamma(0.5)).unwrap();
        assert_eq!(out.o.as_slice(), &[1.0, 17.5]);
        assert_eq!(out.den.as_deref(), Some(&[1.0, 5.5][..]));

        let empty = gauss_tokens(0, 0, 3, 2, 1.0).unwrap();
        let out = hla2_forward(&empty, &KernelConfig::default()).unwrap();
        assert_eq!(out.o.shape(), (0, 2));
        assert_eq!(out.den.as_deref(), Some(&[][..]));
    }

    #[test]
    fn degenerate_denominator_reports_position() {
        let b = w1();
        let zero_q = TokenBatch::new(Matrix::zeros(2, 1), b.k().clone(), b.v().clone()).unwrap();
        let cfg = KernelConfig::default().with_eps(0.0).with_normalize(true);
        assert!(matches!(
            hla2_forward(&zero_q, &cfg),
            Err(HlaError::DegenerateDenominator { t: 0 })
        ));
    }

    #[test]
    fn unmasked_examples() {
        let out = hla2_unmasked_forward(&w1(), &KernelConfig::default()).unwrap();
        assert_eq!(out.o.as_slice(), &[1.0, 28.0]);

        let b = gauss_tokens(2, 1, 3, 2, 1.0).unwrap();
        let out = hla2_unmasked_forward(&b, &KernelConfig::default()).unwrap();
        let s = crate::matrix::dot(b.q().row(0), b.k().row(0)).powi(2);
        let want = Matrix::from_vec(1, 2, b.v().row(0).iter().map(|x| s * x).collect()).unwrap();
        assert!(max_rel_err(&out.o, &want).unwrap() <= 1e-12);
    }

    #[test]
    fn unmasked_matches_definitional_sums() {
        for seed in 0..5 {
            let b = gauss_tokens(seed, 12, 4, 3, 0.5).unwrap();
            for normalize in [false, true] {
                let cfg = KernelConfig::default().with_normalize(normalize);
                let got = hla2_unmasked_forward(&b, &cfg).unwrap();
                let want = oracle_hla2_unmasked(&b, &cfg).unwrap();
                assert!(max_rel_err(&got.o, &want.o).unwrap() <= 1e-10);
            }
        }
    }

    #[test]
    fn identity_metric_reduces_to_linear_attention() {
        let b = gauss_tokens(31, 10, 4, 3, 0.5).unwrap();
        let cfg = KernelConfig::default().with_metric_override(Matrix::identity(4));
        let got = hla2_unmasked_forward(&b, &cfg).unwrap();
        let want = linear_attention_identity(&tie_keys(&b), &KernelConfig::default()).unwrap();
        assert!(max_rel_err(&got.o, &want.o).unwrap() <= 1e-12);
        let bad = KernelConfig::default().with_metric_override(Matrix::identity(3));
        assert!(hla2_unmasked_forward(&b, &bad).is_err());
    }

    #[test]
    fn metric_override_rejected_for_masked_kernel() {
        let cfg = KernelConfig::default().with_metric_override(Matrix::identity(1));
        assert!(matches!(
            hla2_forward(&w1(), &cfg),
            Err(HlaError::InvalidConfig(_))
        ));
    }

    #[test]
    fn matches_oracle_small() {
        for seed in 0..20 {
            let b = gauss_tokens(
                seed,
                1 + seed as usize % 17,
                1 + seed as usize % 5,
                1 + seed as usize % 3,
                0.6,
            )
            .unwrap();
            let cfg = KernelConfig::default();
            let got = hla2_forward(&b, &cfg).unwrap();
            let want = oracle_hla2(&b, &cfg).unwrap();
            assert!(
                max_rel_err(&got.o, &want.o).unwrap() <= 1e-10,
                "seed {seed}"
            );
        }
    }

    fn psd_min_eigenvalue(s: &Matrix) -> f64 {
        let d = s.rows();
        let m = nalgebra::DMatrix::from_row_slice(d, d, s.as_slice());
        m.symmetric_eigen().eigenvalues.min()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn state_stays_symmetric_and_psd(seed in any::<u64>(), n in 1usize..40, d in 1usize..6, gamma in prop::sample::select(vec![1.0, 0.9, 0.5])) {
            let b = gauss_tokens(seed, n, d, 2, 1.0).unwrap();
            let mut st = State2::new(d, 2);
            for t in 0..n {
                let (q, k, v) = b.token(t);
                st.step(q, k, v, gamma).unwrap();
                for i in 0..d {
                    for j in 0..d {
                        prop_assert!((st.s[(i, j)] - st.s[(j, i)]).to_f64().abs() <= 1e-12);
                    }
                }
            }
            prop_assert!(psd_min_eigenvalue(&st.s.round()) >= -1e-10);
        }

        #[test]
        fn causal_prefix_bitwise(seed in any::<u64>(), n in 2usize..20, cut in 0usize..20, gamma in prop::sample::select(vec![1.0, 0.7])) {
            let cut = cut % n;
            let a = gauss_tokens(seed, n, 3, 2, 1.0).unwrap();
            let b = gauss_tokens(seed ^ 0xABCD, n, 3, 2, 1.0).unwrap();
            let spliced = splice(&a, &b, cut + 1);
            let cfg = KernelConfig::default().with_gamma(gamma).with_lambda(0.1);
            let x = hla2_forward(&a, &cfg).unwrap();
            let y = hla2_forward(&spliced, &cfg).unwrap();
            let bits = |m: &Matrix, t: usize| m.row(t).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            for t in 0..=cut {
                prop_assert_eq!(bits(&x.o, t), bits(&y.o, t));
            }
        }

        #[test]
        fn homogeneous_degrees(seed in any::<u64>(), gamma in prop::sample::select(vec![1.0, 0.8])) {
            let b = gauss_tokens(seed, 9, 3, 2, 1.0).unwrap();
            let cfg = KernelConfig::default().with_gamma(gamma);
            let base = hla2_forward(&b, &cfg).unwrap().o;
            for (which, deg) in [(0, 2), (1, 2), (2, 1)] {
                let got = hla2_forward(&scale_input(&b, which, 2.0), &cfg).unwrap().o;
                prop_assert!(max_rel_err(&got, &base.scaled(2f64.powi(deg))).unwrap() <= 1e-12);
            }
        }

        #[test]
        fn normalization_consistent(seed in any::<u64>(), gamma in prop::sample::select(vec![1.0, 0.6]), lambda in prop::sample::select(vec![0.0, 0.1])) {
            let b = gauss_tokens(seed, 11, 3, 2, 1.0).unwrap();
            let plain = KernelConfig::default().with_gamma(gamma).with_lambda(lambda);
            let raw = hla2_forward(&b, &plain).unwrap();
            let norm = hla2_forward(&b, &plain.clone().with_normalize(true)).unwrap();
            let den = raw.den.unwrap();
            prop_assume!(den.iter().all(|d| (d + plain.eps).abs() >= 1e-8));
            for (t, dt) in den.iter().enumerate() {
                for c in 0..2 {
                    let back = norm.o[(t, c)] * (dt + plain.eps);
                    prop_assert!(crate::metrics::rel_err(back, raw.o[(t, c)]) <= 1e-12);
                }
            }
        }
    }
}
