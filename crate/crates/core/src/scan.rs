//! Associative-scan execution for second-order HLA and AHLA.
//!
//! Segments are monoid elements: a token becomes a one-token segment and
//! `combine` concatenates adjacent segments (earlier on the left). Under
//! decay each segment also carries its length `len`, its attenuation
//! `rho = gamma^len`, and one attenuated *undecayed* moment (`vkey` for
//! second order, `rt` for AHLA). That moment supplies the cross term of the
//! concatenation and makes the decayed combine associative and equal to the
//! serial recurrence at every `gamma`. At `gamma = 1` it coincides with the
//! plain key moment (resp. `R^KQ`) and the combine reduces to the undecayed
//! semidirect product.
//!
//! The chunked forwards run a two-level scan: an exclusive scan over chunk
//! summaries gives carry-ins, an exclusive scan inside each chunk gives local
//! prefixes, and each token's inclusive state is
//! `(carry ⊕ local_prefix) ⊕ token`.

use rayon::prelude::*;

use crate::ahla::StateA;
use crate::batch::{KernelConfig, OutputBatch, TokenBatch};
use crate::dd::{dot, Dd, DdMatrix};
use crate::error::Result;
use crate::hla2::{assemble, State2};

/// A scan segment with an associative `combine` and a two-sided identity.
pub trait ScanSegment: Clone + Send + Sync {
    fn identity(d: usize, d_v: usize) -> Self;

    fn from_token(q: &[f64], k: &[f64], v: &[f64], gamma: f64) -> Self;

    /// `self ⊕ later`, where every token of `self` precedes `later`.
    fn combine(&self, later: &Self) -> Self;

    /// Unnormalized `(num, den)` readout of an inclusive state.
    fn readout(&self, q: &[f64], cfg: &KernelConfig) -> (Vec<f64>, f64);

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `rb * a + b`, entrywise.
fn decay_merge(rb: Dd, a: &[Dd], b: &[Dd]) -> Vec<Dd> {
    a.iter().zip(b).map(|(&x, &y)| x * rb + y).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment2 {
    pub state: State2,
    /// `gamma^(len-1) * Σ_{i in seg} k_i k_i^T`.
    pub vkey: DdMatrix,
    pub rho: Dd,
    pub len: usize,
}

impl ScanSegment for Segment2 {
    fn identity(d: usize, d_v: usize) -> Self {
        Segment2 {
            state: State2::new(d, d_v),
            vkey: DdMatrix::zeros(d, d),
            rho: Dd::ONE,
            len: 0,
        }
    }

    fn from_token(q: &[f64], k: &[f64], v: &[f64], gamma: f64) -> Self {
        let (d, dv) = (k.len(), v.len());
        let mut seg = Segment2::identity(d, dv);
        seg.state.s.decay_add_outer(1.0, k, k);
        seg.state.c.decay_add_outer(1.0, q, v);
        seg.state.m = q.iter().map(|&x| Dd::new(x)).collect();
        seg.vkey = seg.state.s.clone();
        seg.rho = Dd::new(gamma);
        seg.len = 1;
        seg
    }

    fn combine(&self, b: &Self) -> Self {
        let a = self;
        let rb = b.rho;
        let mut s = a.state.s.scaled(rb);
        s.add_scaled(1.0, &b.state.s);
        let mut c = a.state.c.scaled(rb);
        c.add_scaled(1.0, &b.state.c);
        let m = decay_merge(rb, &a.state.m, &b.state.m);

        let mut g = b.vkey.matmul(&a.state.c);
        g.add_scaled(rb, &a.state.g);
        g.add_scaled(1.0, &b.state.g);
        let mut h = decay_merge(rb, &a.state.h, &b.state.h);
        h.iter_mut()
            .zip(b.vkey.mul_vec(&a.state.m))
            .for_each(|(x, y)| *x += y);

        let mut vkey = a.vkey.scaled(rb);
        vkey.add_scaled(a.rho, &b.vkey);
        Segment2 {
            state: State2 { s, c, m, g, h },
            vkey,
            rho: a.rho * b.rho,
            len: a.len + b.len,
        }
    }

    fn readout(&self, q: &[f64], cfg: &KernelConfig) -> (Vec<f64>, f64) {
        self.state.output(q, cfg.lambda)
    }

    fn len(&self) -> usize {
        self.len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentA {
    pub state: StateA,
    /// `gamma^len * Σ_{i in seg} k_i q_i^T`.
    pub rt: DdMatrix,
    pub rho: Dd,
    pub len: usize,
}

impl ScanSegment for SegmentA {
    fn identity(d: usize, d_v: usize) -> Self {
        SegmentA {
            state: StateA::new(d, d_v),
            rt: DdMatrix::zeros(d, d),
            rho: Dd::ONE,
            len: 0,
        }
    }

    fn from_token(q: &[f64], k: &[f64], v: &[f64], gamma: f64) -> Self {
        let (d, dv) = (k.len(), v.len());
        let mut seg = SegmentA::identity(d, dv);
        let qk = dot(q, k);
        seg.state.p.decay_add_outer(1.0, k, v);
        seg.state.m = k.iter().map(|&x| Dd::new(x)).collect();
        let qkv: Vec<Dd> = v.iter().map(|&x| qk * x).collect();
        seg.state.e.decay_add_outer(1.0, k, &qkv);
        seg.state.nvec = k.iter().map(|&x| qk * x).collect();
        seg.rt.decay_add_outer(1.0, k, q);
        seg.rt.scale_in_place(gamma);
        seg.rho = Dd::new(gamma);
        seg.len = 1;
        seg
    }

    fn combine(&self, b: &Self) -> Self {
        let a = self;
        let rb = b.rho;
        let mut p = a.state.p.scaled(rb);
        p.add_scaled(1.0, &b.state.p);
        let m = decay_merge(rb, &a.state.m, &b.state.m);

        let mut e = b.rt.matmul(&a.state.p);
        e.add_scaled(rb, &a.state.e);
        e.add_scaled(1.0, &b.state.e);
        let mut nvec = decay_merge(rb, &a.state.nvec, &b.state.nvec);
        nvec.iter_mut()
            .zip(b.rt.mul_vec(&a.state.m))
            .for_each(|(x, y)| *x += y);

        let mut rt = a.rt.scaled(rb);
        rt.add_scaled(a.rho, &b.rt);
        SegmentA {
            state: StateA { p, m, e, nvec },
            rt,
            rho: a.rho * b.rho,
            len: a.len + b.len,
        }
    }

    fn readout(&self, q: &[f64], _cfg: &KernelConfig) -> (Vec<f64>, f64) {
        self.state.output(q)
    }

    fn len(&self) -> usize {
        self.len
    }
}

/// Exclusive Blelloch scan: `out[t] = identity ⊕ items[0] ⊕ … ⊕ items[t-1]`.
///
/// The combine tree (up-sweep then down-sweep over the input padded to a
/// power of two) depends only on `items.len()`, so results do not depend on
/// how many workers evaluate a level.
pub fn exclusive_scan<T, F>(items: &[T], identity: &T, combine: F) -> Vec<T>
where
    T: Clone + Send + Sync,
    F: Fn(&T, &T) -> T + Sync,
{
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    let size = n.next_power_of_two();
    let mut tree: Vec<T> = items.to_vec();
    tree.resize(size, identity.clone());

    let mut stride = 2;
    while stride <= size {
        let half = stride / 2;
        tree.par_chunks_mut(stride).for_each(|node| {
            node[stride - 1] = combine(&node[half - 1], &node[stride - 1]);
        });
        stride *= 2;
    }

    tree[size - 1] = identity.clone();
    let mut stride = size;
    while stride >= 2 {
        let half = stride / 2;
        tree.par_chunks_mut(stride).for_each(|node| {
            let left_sum = node[half - 1].clone();
            node[half - 1] = node[stride - 1].clone();
            node[stride - 1] = combine(&node[stride - 1], &left_sum);
        });
        stride /= 2;
    }

    tree.truncate(n);
    tree
}

fn token_segments<S: ScanSegment>(
    batch: &TokenBatch,
    range: std::ops::Range<usize>,
    gamma: f64,
) -> Vec<S> {
    range
        .map(|t| {
            let (q, k, v) = batch.token(t);
            S::from_token(q, k, v, gamma)
        })
        .collect()
}

/// Inclusive per-token readouts `(num, den)` via the two-level scan.
pub fn chunked_readouts<S: ScanSegment>(
    batch: &TokenBatch,
    cfg: &KernelConfig,
) -> Vec<(Vec<f64>, f64)> {
    let (n, d, dv) = (batch.len(), batch.d(), batch.d_v());
    let w = cfg.chunk_width;
    let identity = S::identity(d, dv);
    let ranges: Vec<_> = (0..n)
        .step_by(w)
        .map(|start| start..(start + w).min(n))
        .collect();

    let summaries: Vec<S> = ranges
        .par_iter()
        .map(|r| {
            token_segments::<S>(batch, r.clone(), cfg.gamma)
                .iter()
                .fold(identity.clone(), |acc, seg| acc.combine(seg))
        })
        .collect();
    let carries = exclusive_scan(&summaries, &identity, S::combine);

    let per_chunk: Vec<Vec<(Vec<f64>, f64)>> = ranges
        .par_iter()
        .zip(carries.par_iter())
        .map(|(r, carry)| {
            let tokens = token_segments::<S>(batch, r.clone(), cfg.gamma);
            let local = exclusive_scan(&tokens, &identity, S::combine);
            r.clone()
                .zip(tokens.iter().zip(&local))
                .map(|(t, (token, prefix))| {
                    let inclusive = carry.combine(prefix).combine(token);
                    inclusive.readout(batch.q().row(t), cfg)
                })
                .collect()
        })
        .collect();
    per_chunk.into_iter().flatten().collect()
}

/// Masked second order through the chunked scan; matches `hla2_forward`.
pub fn hla2_chunked_forward(batch: &TokenBatch, cfg: &KernelConfig) -> Result<OutputBatch> {
    cfg.validate_masked("hla2-chunked", true)?;
    assemble(
        chunked_readouts::<Segment2>(batch, cfg).into_iter(),
        batch.d_v(),
        cfg,
    )
}

/// AHLA through the chunked scan; matches `ahla_forward`.
pub fn ahla_chunked_forward(batch: &TokenBatch, cfg: &KernelConfig) -> Result<OutputBatch> {
    cfg.validate_masked("ahla-chunked", false)?;
    assemble(
        chunked_readouts::<SegmentA>(batch, cfg).into_iter(),
        batch.d_v(),
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ahla::ahla_forward;
    use crate::dd::round_vec;
    use crate::fixtures::w1;
    use crate::hla2::hla2_forward;
    use crate::matrix::Matrix;
    use crate::metrics::{max_rel_err, max_rel_err_slices};
    use crate::rng::gauss_tokens;
    use proptest::prelude::*;

    fn tokens<S: ScanSegment>(b: &TokenBatch, gamma: f64) -> Vec<S> {
        token_segments(b, 0..b.len(), gamma)
    }

    fn seg2_scalars(s: &Segment2) -> (f64, f64, f64, f64, f64) {
        let st = &s.state;
        (
            st.s[(0, 0)].to_f64(),
            st.c[(0, 0)].to_f64(),
            st.m[0].to_f64(),
            st.g[(0, 0)].to_f64(),
            st.h[0].to_f64(),
        )
    }

    #[test]
    fn seg2_token_examples() {
        let b = w1();
        let (q, k, v) = b.token(1);
        let t2 = Segment2::from_token(q, k, v, 0.5);
        assert_eq!(seg2_scalars(&t2), (1.0, 6.0, 2.0, 0.0, 0.0));
        assert_eq!(
            (t2.vkey[(0, 0)].to_f64(), t2.rho.to_f64(), t2.len),
            (1.0, 0.5, 1)
        );

        let z = Segment2::from_token(&[0.0; 2], &[0.0; 2], &[0.0; 3], 0.9);
        assert_eq!(z.state, State2::new(2, 3));
        assert_eq!(z.rho, Dd::new(0.9));
    }

    #[test]
    fn seg2_w1_combine() {
        let b = w1();
        for (gamma, want) in [
            (1.0, (2.0, 7.0, 3.0, 1.0, 1.0)),
            (0.5, (1.5, 6.5, 2.5, 1.0, 1.0)),
        ] {
            let segs: Vec<Segment2> = tokens(&b, gamma);
            let ab = segs[0].combine(&segs[1]);
            assert_eq!(seg2_scalars(&ab), want);
            assert_eq!(ab.rho.to_f64(), gamma * gamma);
            assert_eq!(ab.len, 2);
        }
    }

    #[test]
    fn seg_identity_laws_exact() {
        let b = gauss_tokens(3, 5, 3, 2, 1.0).unwrap();
        let segs: Vec<Segment2> = tokens(&b, 0.7);
        let x = segs
            .iter()
            .skip(1)
            .fold(segs[0].clone(), |a, s| a.combine(s));
        let e = Segment2::identity(3, 2);
        assert_eq!(e.combine(&x), x);
        assert_eq!(x.combine(&e), x);

        let segs: Vec<SegmentA> = tokens(&b, 0.7);
        let x = segs
            .iter()
            .skip(1)
            .fold(segs[0].clone(), |a, s| a.combine(s));
        let e = SegmentA::identity(3, 2);
        assert_eq!(e.combine(&x), x);
        assert_eq!(x.combine(&e), x);
    }

    #[test]
    fn sega_token_examples() {
        let b = w1();
        let (q, k, v) = b.token(0);
        let t1 = SegmentA::from_token(q, k, v, 0.25);
        assert_eq!(
            (
                t1.state.p[(0, 0)].to_f64(),
                t1.state.m[0].to_f64(),
                t1.state.e[(0, 0)].to_f64(),
                t1.state.nvec[0].to_f64(),
                t1.rt[(0, 0)].to_f64()
            ),
            (1.0, 1.0, 1.0, 1.0, 0.25)
        );
        let z = SegmentA::from_token(&[0.0, 0.0], &[1.0, 2.0], &[3.0], 1.0);
        assert_eq!(z.state.e.max_abs(), 0.0);
        assert_eq!(z.state.nvec, vec![Dd::ZERO; 2]);
        assert_eq!(z.rt.max_abs(), 0.0);
        assert_eq!(z.state.p.round().as_slice(), &[3.0, 6.0]);

        let u = SegmentA::from_token(&[0.5, -1.0], &[1.0, 2.0], &[3.0], 1.0);
        assert_eq!(u.rt.round().as_slice(), &[0.5, -1.0, 1.0, -2.0]);
    }

    #[test]
    fn sega_w1_combine() {
        let segs: Vec<SegmentA> = tokens(&w1(), 1.0);
        let ab = segs[0].combine(&segs[1]);
        let st = &ab.state;
        assert_eq!(
            (
                st.e[(0, 0)].to_f64(),
                st.nvec[0].to_f64(),
                st.p[(0, 0)].to_f64(),
                st.m[0].to_f64()
            ),
            (9.0, 5.0, 4.0, 2.0)
        );
    }

    #[test]
    fn undecayed_combine_is_plain_semidirect_product() {
        let b = gauss_tokens(12, 7, 3, 2, 1.0).unwrap();
        let segs: Vec<Segment2> = tokens(&b, 1.0);
        let a = segs[..3]
            .iter()
            .skip(1)
            .fold(segs[0].clone(), |x, s| x.combine(s));
        let c = segs[3..]
            .iter()
            .skip(1)
            .fold(segs[3].clone(), |x, s| x.combine(s));
        assert_eq!(a.vkey, a.state.s);
        let ab = a.combine(&c);
        let mut g = a.state.g.clone();
        g.add_scaled(1.0, &c.state.g);
        g.add_scaled(1.0, &c.state.s.matmul(&a.state.c));
        assert!(max_rel_err(&ab.state.g.round(), &g.round()).unwrap() <= 1e-15);
    }

    #[test]
    fn exclusive_scan_small_cases() {
        let add = |a: &i64, b: &i64| a + b;
        assert!(exclusive_scan(&[], &0, add).is_empty());
        assert_eq!(exclusive_scan(&[5], &0, add), vec![0]);
        assert_eq!(
            exclusive_scan(&[1, 2, 3, 4, 5], &0, add),
            vec![0, 1, 3, 6, 10]
        );
        assert_eq!(exclusive_scan(&[0, 0, 0], &0, add), vec![0, 0, 0]);
        // Non-commutative: string concatenation keeps order.
        let cat = |a: &String, b: &String| format!("{a}{b}");
        let words: Vec<String> = ["a", "b", "c", "d", "e", "f", "g"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let got = exclusive_scan(&words, &String::new(), cat);
        assert_eq!(got, vec!["", "a", "ab", "abc", "abcd", "abcde", "abcdef"]);
    }

    #[test]
    fn exclusive_scan_matches_left_fold() {
        let b = gauss_tokens(44, 13, 3, 2, 1.0).unwrap();
        let segs: Vec<Segment2> = tokens(&b, 1.0);
        let id = Segment2::identity(3, 2);
        let scanned = exclusive_scan(&segs, &id, Segment2::combine);
        let mut acc = id.clone();
        for (t, seg) in segs.iter().enumerate() {
            assert!(
                max_rel_err(&scanned[t].state.g.round(), &acc.state.g.round()).unwrap() <= 1e-15
            );
            assert!(
                max_rel_err(&scanned[t].state.s.round(), &acc.state.s.round()).unwrap() <= 1e-15
            );
            acc = acc.combine(seg);
        }
        let ids = vec![id.clone(); 6];
        assert!(exclusive_scan(&ids, &id, Segment2::combine)
            .iter()
            .all(|s| *s == id));
    }

    #[test]
    fn chunked_w1() {
        let cfg = KernelConfig::default().with_chunk_width(1);
        assert_eq!(
            hla2_chunked_forward(&w1(), &cfg).unwrap().o.as_slice(),
            &[1.0, 26.0]
        );
        assert_eq!(
            ahla_chunked_forward(&w1(), &cfg).unwrap().o.as_slice(),
            &[1.0, 18.0]
        );
        let cfg = KernelConfig::default().with_chunk_width(2).with_gamma(0.5);
        assert_eq!(
            hla2_chunked_forward(&w1(), &cfg).unwrap().o.as_slice(),
            &[1.0, 17.5]
        );
        let serial = ahla_forward(&w1(), &cfg).unwrap();
        assert!(
            max_rel_err(&ahla_chunked_forward(&w1(), &cfg).unwrap().o, &serial.o).unwrap() <= 1e-12
        );
    }

    #[test]
    fn chunked_empty() {
        let b = gauss_tokens(0, 0, 2, 3, 1.0).unwrap();
        let out = ahla_chunked_forward(&b, &KernelConfig::default()).unwrap();
        assert_eq!(out.o.shape(), (0, 3));
        assert_eq!(
            hla2_chunked_forward(&b, &KernelConfig::default())
                .unwrap()
                .o
                .shape(),
            (0, 3)
        );
    }

    #[test]
    fn chunked_random_matches_serial() {
        let b = gauss_tokens(2024, 37, 4, 3, 0.5).unwrap();
        let cfg = KernelConfig::default().with_chunk_width(8);
        let got = hla2_chunked_forward(&b, &cfg).unwrap();
        let want = hla2_forward(&b, &cfg).unwrap();
        assert!(max_rel_err(&got.o, &want.o).unwrap() <= 1e-12);
    }

    #[test]
    fn chunked_is_bitwise_stable_across_thread_counts() {
        let b = gauss_tokens(5, 70, 4, 3, 0.5).unwrap();
        let cfg = KernelConfig::default().with_chunk_width(5).with_gamma(0.9);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                (
                    hla2_chunked_forward(&b, &cfg).unwrap(),
                    ahla_chunked_forward(&b, &cfg).unwrap(),
                )
            })
        };
        let one = run(1);
        for threads in [2, 4, 7] {
            let other = run(threads);
            let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&one.0.o), bits(&other.0.o));
            assert_eq!(bits(&one.1.o), bits(&other.1.o));
        }
    }

    fn random_segment<S: ScanSegment>(seed: u64, gamma: f64) -> S {
        let mut rng = crate::rng::SplitMix64::new(seed);
        let len = rng.next_range(1, 5);
        let b = gauss_tokens(rng.next_u64(), len, 3, 2, 1.0).unwrap();
        let segs: Vec<S> = tokens(&b, gamma);
        segs.iter()
            .skip(1)
            .fold(segs[0].clone(), |a, s| a.combine(s))
    }

    fn seg2_max_rel(x: &Segment2, y: &Segment2) -> f64 {
        [
            max_rel_err(&x.state.s.round(), &y.state.s.round()).unwrap(),
            max_rel_err(&x.state.c.round(), &y.state.c.round()).unwrap(),
            max_rel_err(&x.state.g.round(), &y.state.g.round()).unwrap(),
            max_rel_err(&x.vkey.round(), &y.vkey.round()).unwrap(),
            max_rel_err_slices(&round_vec(&x.state.m), &round_vec(&y.state.m)),
            max_rel_err_slices(&round_vec(&x.state.h), &round_vec(&y.state.h)),
            crate::metrics::rel_err(x.rho.to_f64(), y.rho.to_f64()),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn seg2_associative(seed in any::<u64>(), gamma in prop::sample::select(vec![1.0, 0.9, 0.5])) {
            let a: Segment2 = random_segment(seed, gamma);
            let b: Segment2 = random_segment(seed.wrapping_add(1), gamma);
            let c: Segment2 = random_segment(seed.wrapping_add(2), gamma);
            let left = a.combine(&b).combine(&c);
            let right = a.combine(&b.combine(&c));
            prop_assert!(seg2_max_rel(&left, &right) <= 1e-12);
            prop_assert_eq!(left.len, right.len);
        }

        #[test]
        fn segment_rho_tracks_length(seed in any::<u64>(), gamma in prop::sample::select(vec![1.0, 0.9, 0.5])) {
            let a: Segment2 = random_segment(seed, gamma);
            prop_assert!((a.rho.to_f64() - gamma.powi(a.len as i32)).abs() <= 1e-12);
            let b: SegmentA = random_segment(seed, gamma);
            prop_assert!((b.rho.to_f64() - gamma.powi(b.len as i32)).abs() <= 1e-12);
        }

        #[test]
        fn hla2_chunked_equals_serial(seed in any::<u64>(), n in 0usize..40, w in 1usize..10,
                                      gamma in prop::sample::select(vec![1.0, 0.9, 0.5]), lambda in prop::sample::select(vec![0.0, 0.1])) {
            let b = gauss_tokens(seed, n, 3, 2, 0.6).unwrap();
            let cfg = KernelConfig::default().with_gamma(gamma).with_lambda(lambda).with_chunk_width(w);
            let got = hla2_chunked_forward(&b, &cfg).unwrap();
            let want = hla2_forward(&b, &cfg).unwrap();
            prop_assert!(max_rel_err(&got.o, &want.o).unwrap() <= 1e-12);
        }
    }
}
