//! Verification suites run by `hla check` and the acceptance target.
//!
//! Every suite draws its instances deterministically from the run seed, so a
//! report is a pure function of [`CheckOptions`].

use hla_core::fixtures::{scale_input, splice, tie_keys, w1};
use hla_core::metrics::max_rel_err_slices;
use hla_core::scan::{ScanSegment, Segment2, SegmentA};
use hla_core::{
    ahla_chunked_forward, ahla_forward, fd_gradient, gauss_tokens, hla2_backward,
    hla2_chunked_forward, hla2_forward, hla2_unmasked_forward, hla3_forward,
    linear_attention_identity, max_rel_err, oracle_ahla, oracle_hla2, oracle_hla2_value_adjoint,
    oracle_hla3, oracle_t2_factorization, Dd, HlaError, KernelConfig, Matrix, OutputBatch, Result,
    SplitMix64, TokenBatch,
};
use rayon::prelude::*;
use serde::Serialize;

pub const ORACLE_TOL: f64 = 1e-10;
pub const HLA3_TOL: f64 = 1e-9;
pub const SCAN_TOL: f64 = 1e-12;
pub const ASSOC_TOL: f64 = 1e-12;
pub const IDENTITY_TOL: f64 = 1e-15;
pub const GOLDEN_TOL: f64 = 1e-12;
pub const HOMOGENEITY_TOL: f64 = 1e-12;
pub const LINATTN_TOL: f64 = 1e-12;
pub const T2_TOL: f64 = 1e-10;
pub const GRAD_FD_TOL: f64 = 1e-5;
pub const GRAD_V_TOL: f64 = 1e-10;
pub const FD_STEP: f64 = 1e-6;

/// Normalized comparisons skip instances whose reference denominator has
/// `|den + eps|` below this.
pub const DEN_GUARD: f64 = 1e-8;

/// Central differences near a pole of the normalized map carry truncation
/// error of order `(FD_STEP / |den + eps|)^2`, so the gradient check also
/// skips normalized instances with `|den + eps|` under this many steps.
pub const FD_DEN_STEPS: f64 = 1e3;

pub const SCAN_WIDTHS: [usize; 6] = [1, 2, 3, 5, 8, 64];
pub const SCAN_GAMMAS: [f64; 3] = [1.0, 0.9, 0.5];

pub const SUITES: [&str; 12] = [
    "hla2-oracle",
    "ahla-oracle",
    "hla3-oracle",
    "scan-serial",
    "monoid-laws",
    "golden-w1",
    "causality",
    "homogeneity",
    "linattn-reduction",
    "t2-factorization",
    "gradient-fd",
    "gradient-v-adjoint",
];

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub seed: u64,
    pub trials: usize,
    pub max_n: usize,
    pub max_d: usize,
    pub max_dv: usize,
    /// Test hook: perturbs the kernel under test in the named suite.
    pub inject_fault: Option<String>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            seed: 0,
            trials: 200,
            max_n: 64,
            max_d: 8,
            max_dv: 8,
            inject_fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub pass: bool,
    /// First failing instance, if any.
    #[serde(skip)]
    pub failure: Option<String>,
}

/// Accumulates the worst error of a suite and remembers the first failure.
struct Tally {
    suite: &'static str,
    trials: usize,
    worst: f64,
    pass: bool,
    failure: Option<String>,
}

impl Tally {
    fn new(suite: &'static str) -> Self {
        Tally {
            suite,
            trials: 0,
            worst: 0.0,
            pass: true,
            failure: None,
        }
    }

    fn record(&mut self, err: f64, tol: f64, describe: impl FnOnce() -> String) {
        self.worst = self.worst.max(err);
        if err.is_nan() || err > tol {
            self.fail(describe().to_string() + &format!(" err={err:e} tol={tol:e}"));
        }
    }

    fn fail(&mut self, msg: String) {
        self.pass = false;
        if self.failure.is_none() {
            self.failure = Some(msg);
        }
    }

    fn finish(self) -> SuiteReport {
        SuiteReport {
            suite: self.suite.to_string(),
            trials: self.trials,
            max_rel_err: self.worst,
            pass: self.pass,
            failure: self.failure,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Instance {
    trial: usize,
    batch_seed: u64,
    n: usize,
    d: usize,
    dv: usize,
}

impl Instance {
    fn batch(&self) -> TokenBatch {
        gauss_tokens(
            self.batch_seed,
            self.n,
            self.d,
            self.dv,
            1.0 / (self.d as f64).sqrt(),
        )
        .expect("instance dimensions are valid")
    }

    fn describe(&self, seed: u64) -> String {
        format!(
            "seed={seed} trial={} batch_seed={} n={} d={} dv={}",
            self.trial, self.batch_seed, self.n, self.d, self.dv
        )
    }
}

fn suite_salt(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

fn instances(
    opts: &CheckOptions,
    suite: &str,
    count: usize,
    max_n: usize,
    max_d: usize,
    max_dv: usize,
) -> Vec<Instance> {
    let mut rng = SplitMix64::new(opts.seed ^ suite_salt(suite));
    (0..count)
        .map(|trial| Instance {
            trial,
            n: rng.next_range(1, max_n.max(1)),
            d: rng.next_range(1, max_d.max(1)),
            dv: rng.next_range(1, max_dv.max(1)),
            batch_seed: rng.next_u64(),
        })
        .collect()
}

impl CheckOptions {
    fn faulty(&self, suite: &str) -> bool {
        self.inject_fault.as_deref() == Some(suite)
    }

    fn tamper(&self, suite: &str, mut out: OutputBatch) -> OutputBatch {
        if self.faulty(suite) && out.o.rows() > 0 {
            let x = &mut out.o.as_mut_slice()[0];
            *x += 1e-3 * (1.0 + x.abs());
        }
        out
    }

    fn share(&self, divisor: usize) -> usize {
        (self.trials / divisor).max(1)
    }
}

fn den_ok(reference: &OutputBatch, cfg: &KernelConfig) -> bool {
    den_above(reference, cfg, DEN_GUARD)
}

fn den_above(reference: &OutputBatch, cfg: &KernelConfig, guard: f64) -> bool {
    !cfg.normalize
        || reference
            .den
            .as_ref()
            .is_none_or(|d| d.iter().all(|x| (x + cfg.eps).abs() >= guard))
}

type Kernel = fn(&TokenBatch, &KernelConfig) -> Result<OutputBatch>;

/// Kernel vs reference on random instances, both normalize modes.
fn versus(
    opts: &CheckOptions,
    suite: &'static str,
    count: usize,
    (max_n, max_d, max_dv): (usize, usize, usize),
    kernel: Kernel,
    reference: Kernel,
    tol: f64,
) -> SuiteReport {
    let cases = instances(opts, suite, count, max_n, max_d, max_dv);
    let results: Vec<_> = cases
        .par_iter()
        .map(|inst| {
            let batch = inst.batch();
            let mut errs = Vec::new();
            for normalize in [false, true] {
                let cfg = KernelConfig::default().with_normalize(normalize);
                let want = match reference(&batch, &cfg) {
                    Ok(w) if den_ok(&w, &cfg) => w,
                    Ok(_) | Err(HlaError::DegenerateDenominator { .. }) => continue,
                    Err(e) => {
                        return Err(format!(
                            "{} normalize={normalize}: {e}",
                            inst.describe(opts.seed)
                        ))
                    }
                };
                let got = kernel(&batch, &cfg).map(|o| opts.tamper(suite, o));
                match got {
                    Ok(got) => errs.push((normalize, max_rel_err(&got.o, &want.o).unwrap())),
                    Err(e) => {
                        return Err(format!(
                            "{} normalize={normalize}: {e}",
                            inst.describe(opts.seed)
                        ))
                    }
                }
            }
            Ok(errs)
        })
        .collect();
    let mut tally = Tally::new(suite);
    tally.trials = cases.len();
    for (inst, res) in cases.iter().zip(results) {
        match res {
            Ok(errs) => {
                for (normalize, err) in errs {
                    tally.record(err, tol, || {
                        format!("{} normalize={normalize}", inst.describe(opts.seed))
                    });
                }
            }
            Err(msg) => tally.fail(msg),
        }
    }
    tally.finish()
}

pub fn hla2_oracle(opts: &CheckOptions) -> SuiteReport {
    versus(
        opts,
        "hla2-oracle",
        opts.trials,
        (opts.max_n, opts.max_d, opts.max_dv),
        hla2_forward,
        oracle_hla2,
        ORACLE_TOL,
    )
}

pub fn ahla_oracle(opts: &CheckOptions) -> SuiteReport {
    versus(
        opts,
        "ahla-oracle",
        opts.trials,
        (opts.max_n, opts.max_d, opts.max_dv),
        ahla_forward,
        oracle_ahla,
        ORACLE_TOL,
    )
}

pub fn hla3_oracle(opts: &CheckOptions) -> SuiteReport {
    let dims = (opts.max_n.min(16), opts.max_d.min(6), opts.max_dv);
    versus(
        opts,
        "hla3-oracle",
        opts.share(4),
        dims,
        hla3_forward,
        oracle_hla3,
        HLA3_TOL,
    )
}

/// Chunked scans vs serial recurrences over the width/decay/ridge grid.
pub fn scan_serial(opts: &CheckOptions) -> SuiteReport {
    const SUITE: &str = "scan-serial";
    let cases = instances(
        opts,
        SUITE,
        opts.share(4),
        opts.max_n,
        opts.max_d,
        opts.max_dv,
    );
    let mut configs = Vec::new();
    for &w in &SCAN_WIDTHS {
        for &gamma in &SCAN_GAMMAS {
            for normalize in [false, true] {
                for (hla2, lambda) in [(true, 0.0), (true, 0.1), (false, 0.0)] {
                    let cfg = KernelConfig::default()
                        .with_chunk_width(w)
                        .with_gamma(gamma)
                        .with_lambda(lambda)
                        .with_normalize(normalize);
                    configs.push((hla2, cfg));
                }
            }
        }
    }
    let results: Vec<Vec<(String, std::result::Result<f64, String>)>> = cases
        .par_iter()
        .map(|inst| {
            let batch = inst.batch();
            configs
                .iter()
                .filter_map(|(hla2, cfg)| {
                    let (serial, chunked): (Kernel, Kernel) = if *hla2 {
                        (hla2_forward, hla2_chunked_forward)
                    } else {
                        (ahla_forward, ahla_chunked_forward)
                    };
                    let label = format!(
                        "{} kernel={} w={} gamma={} lambda={} normalize={}",
                        inst.describe(opts.seed),
                        if *hla2 { "hla2" } else { "ahla" },
                        cfg.chunk_width,
                        cfg.gamma,
                        cfg.lambda,
                        cfg.normalize
                    );
                    let want = match serial(&batch, cfg) {
                        Ok(w) if den_ok(&w, cfg) => w,
                        Ok(_) | Err(HlaError::DegenerateDenominator { .. }) => return None,
                        Err(e) => return Some((label, Err(e.to_string()))),
                    };
                    let got = chunked(&batch, cfg).map(|o| opts.tamper(SUITE, o));
                    Some(match got {
                        Ok(got) => (label, Ok(max_rel_err(&got.o, &want.o).unwrap())),
                        Err(e) => (label, Err(e.to_string())),
                    })
                })
                .collect()
        })
        .collect();
    let mut tally = Tally::new(SUITE);
    tally.trials = cases.len();
    for (label, res) in results.into_iter().flatten() {
        match res {
            Ok(err) => tally.record(err, SCAN_TOL, || label),
            Err(e) => tally.fail(format!("{label}: {e}")),
        }
    }
    tally.finish()
}

fn random_segment<S: ScanSegment>(rng: &mut SplitMix64, d: usize, dv: usize, gamma: f64) -> S {
    let len = rng.next_range(1, 6);
    let b = gauss_tokens(rng.next_u64(), len, d, dv, 1.0 / (d as f64).sqrt()).expect("valid dims");
    (0..len).fold(S::identity(d, dv), |acc, t| {
        let (q, k, v) = b.token(t);
        acc.combine(&S::from_token(q, k, v, gamma))
    })
}

/// Flattened view of a segment for entrywise comparison.
pub trait Flatten {
    fn flatten(&self) -> Vec<f64>;
}

fn rounded(parts: &[&[Dd]], len: usize) -> Vec<f64> {
    let mut out: Vec<f64> = parts
        .iter()
        .flat_map(|p| p.iter().map(|x| x.to_f64()))
        .collect();
    out.push(len as f64);
    out
}

impl Flatten for Segment2 {
    fn flatten(&self) -> Vec<f64> {
        let s = &self.state;
        let parts = [
            s.s.as_slice(),
            s.c.as_slice(),
            &s.m,
            s.g.as_slice(),
            &s.h,
            self.vkey.as_slice(),
            &[self.rho],
        ];
        rounded(&parts, self.len)
    }
}

impl Flatten for SegmentA {
    fn flatten(&self) -> Vec<f64> {
        let s = &self.state;
        rounded(
            &[
                s.p.as_slice(),
                &s.m,
                s.e.as_slice(),
                &s.nvec,
                self.rt.as_slice(),
                &[self.rho],
            ],
            self.len,
        )
    }
}

fn monoid_for<S: ScanSegment + Flatten>(
    opts: &CheckOptions,
    rng: &mut SplitMix64,
    tally: &mut Tally,
    name: &str,
    gamma: f64,
    count: usize,
) {
    let faulty = opts.faulty("monoid-laws");
    for trial in 0..count {
        let (d, dv) = (
            rng.next_range(1, opts.max_d.max(1)),
            rng.next_range(1, opts.max_dv.max(1)),
        );
        let a: S = random_segment(rng, d, dv, gamma);
        let b: S = random_segment(rng, d, dv, gamma);
        let c: S = random_segment(rng, d, dv, gamma);
        let left = a.combine(&b).combine(&c).flatten();
        let mut right = a.combine(&b.combine(&c)).flatten();
        if faulty {
            right[0] += 1e-6 * (1.0 + right[0].abs());
        }
        let describe = || {
            format!(
                "seed={} operator={name} gamma={gamma} trial={trial} d={d} dv={dv}",
                opts.seed
            )
        };
        tally.record(max_rel_err_slices(&left, &right), ASSOC_TOL, || {
            describe() + " law=associativity"
        });
        let e = S::identity(d, dv);
        let x = a.flatten();
        let id_err = max_rel_err_slices(&e.combine(&a).flatten(), &x)
            .max(max_rel_err_slices(&a.combine(&e).flatten(), &x));
        tally.record(id_err, IDENTITY_TOL, || describe() + " law=identity");
    }
}

/// Associativity and two-sided identity for both segment monoids.
pub fn monoid_laws(opts: &CheckOptions) -> SuiteReport {
    const SUITE: &str = "monoid-laws";
    let per = opts.trials * 5;
    let mut rng = SplitMix64::new(opts.seed ^ suite_salt(SUITE));
    let mut tally = Tally::new(SUITE);
    for gamma in SCAN_GAMMAS {
        monoid_for::<Segment2>(opts, &mut rng, &mut tally, "hla2", gamma, per);
        monoid_for::<SegmentA>(opts, &mut rng, &mut tally, "ahla", gamma, per);
    }
    tally.trials = per;
    tally.finish()
}

/// Hand-derived values on the worked instance W1.
pub fn golden_w1(opts: &CheckOptions) -> SuiteReport {
    const SUITE: &str = "golden-w1";
    let mut tally = Tally::new(SUITE);
    tally.trials = 1;
    let b = w1();
    let unit = KernelConfig::default();
    let decayed = KernelConfig::default().with_gamma(0.5);
    type Golden<'a> = (&'a str, Kernel, &'a KernelConfig, [f64; 2], [f64; 2]);
    let cases: [Golden; 4] = [
        ("hla2", hla2_forward, &unit, [1.0, 26.0], [1.0, 10.0]),
        ("ahla", ahla_forward, &unit, [1.0, 18.0], [1.0, 10.0]),
        ("hla3", hla3_forward, &unit, [1.0, 64.0], [1.0, 28.0]),
        (
            "hla2 gamma=0.5",
            hla2_forward,
            &decayed,
            [1.0, 17.5],
            [1.0, 5.5],
        ),
    ];
    for (name, kernel, cfg, o, den) in cases {
        match kernel(&b, cfg).map(|out| opts.tamper(SUITE, out)) {
            Ok(out) => {
                let err = max_rel_err_slices(out.o.as_slice(), &o)
                    .max(max_rel_err_slices(out.den.as_deref().unwrap_or(&[]), &den));
                tally.record(err, GOLDEN_TOL, || format!("W1 {name}"));
            }
            Err(e) => tally.fail(format!("W1 {name}: {e}")),
        }
    }
    tally.finish()
}

fn bits(m: &Matrix, rows: usize) -> Vec<u64> {
    m.as_slice()[..rows * m.cols()]
        .iter()
        .map(|x| x.to_bits())
        .collect()
}

/// Perturbing every token after position `t` leaves rows `0..=t` bitwise unchanged.
pub fn causality(opts: &CheckOptions) -> SuiteReport {
    const SUITE: &str = "causality";
    let cases = instances(
        opts,
        SUITE,
        opts.share(2),
        opts.max_n,
        opts.max_d,
        opts.max_dv,
    );
    let kernels: [(&str, Kernel); 4] = [
        ("hla2", hla2_forward),
        ("hla2-unmasked", hla2_unmasked_forward),
        ("ahla", ahla_forward),
        ("hla3", hla3_forward),
    ];
    let mut tally = Tally::new(SUITE);
    tally.trials = cases.len();
    let mut rng = SplitMix64::new(opts.seed ^ suite_salt("causality-cut"));
    for inst in &cases {
        let a = inst.batch();
        let other =
            gauss_tokens(inst.batch_seed ^ 0x5bd1_e995, inst.n, inst.d, inst.dv, 1.0).unwrap();
        let cut = rng.next_range(0, inst.n - 1);
        let spliced = splice(&a, &other, cut + 1);
        let gamma = [1.0, 0.9][inst.trial % 2];
        let cfg = KernelConfig::default().with_gamma(gamma);
        for (name, kernel) in kernels {
            let (x, y) = match (kernel(&a, &cfg), kernel(&spliced, &cfg)) {
                (Ok(x), Ok(y)) => (x, opts.tamper(SUITE, y)),
                (Err(e), _) | (_, Err(e)) => {
                    tally.fail(format!("{} kernel={name}: {e}", inst.describe(opts.seed)));
                    continue;
                }
            };
            let same = bits(&x.o, cut + 1) == bits(&y.o, cut + 1);
            let err = max_rel_err_slices(
                &x.o.as_slice()[..(cut + 1) * inst.dv],
                &y.o.as_slice()[..(cut + 1) * inst.dv],
            );
            tally.worst = tally.worst.max(err);
            if !same {
                tally.fail(format!(
                    "{} kernel={name} cut={cut}: prefix rows changed (rel {err:e})",
                    inst.describe(opts.seed)
                ));
            }
        }
    }
    tally.finish()
}

/// Scaling Q, K or V by 2 scales unnormalized outputs by the operator's degree.
pub fn homogeneity(opts: &CheckOptions) -> SuiteReport {
    const SUITE: &str = "homogeneity";
    let cases = instances(
        opts,
        SUITE,
        opts.share(2),
        opts.max_n.min(32),
        opts.max_d,
        opts.max_dv,
    );
    let kernels: [(&str, Kernel, [i32; 3]); 3] = [
        ("hla2", hla2_forward, [2, 2, 1]),
        ("ahla", ahla_forward, [2, 2, 1]),
        ("hla3", hla3_forward, [3, 3, 1]),
    ];
    let mut tally = Tally::new(SUITE);
    tally.trials = cases.len();
    for inst in &cases {
        let b = inst.batch();
        let cfg = KernelConfig::default().with_gamma([1.0, 0.9][inst.trial % 2]);
        for (name, kernel, degrees) in kernels {
            let base = kernel(&b, &cfg).unwrap().o;
            for (which, deg) in degrees.into_iter().enumerate() {
                let got = opts
                    .tamper(SUITE, kernel(&scale_input(&b, which, 2.0), &cfg).unwrap())
                    .o;
                let err = max_rel_err(&got, &base.scaled(2f64.powi(deg))).unwrap();
                tally.record(err, HOMOGENEITY_TOL, || {
                    format!(
                        "{} kernel={name} input={}",
                        inst.describe(opts.seed),
                        ["Q", "K", "V"][which]
                    )
                });
            }
        }
    }
    tally.finish()
}

/// Unmasked second order with metric `I` equals identity-feature linear
/// attention with tied keys, `Σ_{i<=t} (q_t·q_i) v_i`.
pub fn linattn_reduction(opts: &CheckOptions) -> SuiteReport {
    const SUITE: &str = "linattn-reduction";
    let cases = instances(
        opts,
        SUITE,
        opts.share(2),
        opts.max_n,
        opts.max_d,
        opts.max_dv,
    );
    let mut tally = Tally::new(SUITE);
    tally.trials = cases.len();
    for inst in &cases {
        let b = inst.batch();
        let cfg = KernelConfig::default().with_metric_override(Matrix::identity(inst.d));
        let got = opts.tamper(SUITE, hla2_unmasked_forward(&b, &cfg).unwrap());
        let want = linear_attention_identity(&tie_keys(&b), &KernelConfig::default()).unwrap();
        let err = max_rel_err(&got.o, &want.o)
            .unwrap()
            .max(max_rel_err_slices(
                got.den.as_deref().unwrap(),
                want.den.as_deref().unwrap(),
            ));
        tally.record(err, LINATTN_TOL, || inst.describe(opts.seed));
    }
    tally.finish()
}

pub fn t2_factorization(opts: &CheckOptions) -> SuiteReport {
    const SUITE: &str = "t2-factorization";
    let cases = instances(
        opts,
        SUITE,
        opts.share(2),
        opts.max_n,
        opts.max_d,
        opts.max_dv,
    );
    let mut tally = Tally::new(SUITE);
    tally.trials = cases.len();
    for inst in &cases {
        let b = inst.batch();
        let (lhs, mut rhs) = oracle_t2_factorization(b.q(), b.k()).unwrap();
        if opts.faulty(SUITE) {
            rhs.as_mut_slice()[0] += 1e-3;
        }
        tally.record(max_rel_err(&lhs, &rhs).unwrap(), T2_TOL, || {
            inst.describe(opts.seed)
        });
    }
    tally.finish()
}

fn cotangent(inst: &Instance) -> Matrix {
    gauss_tokens(inst.batch_seed.rotate_left(17), inst.n, inst.dv, 1, 1.0)
        .unwrap()
        .q()
        .clone()
}

/// Reverse pass vs central finite differences over the decay/ridge/normalize grid.
pub fn gradient_fd(opts: &CheckOptions) -> SuiteReport {
    const SUITE: &str = "gradient-fd";
    let cases = instances(
        opts,
        SUITE,
        opts.share(4),
        opts.max_n.min(6),
        opts.max_d.min(4),
        opts.max_dv.min(3),
    );
    let mut configs = Vec::new();
    for gamma in [1.0, 0.5] {
        for lambda in [0.0, 0.1] {
            for normalize in [false, true] {
                configs.push(
                    KernelConfig::default()
                        .with_gamma(gamma)
                        .with_lambda(lambda)
                        .with_normalize(normalize),
                );
            }
        }
    }
    let results: Vec<Vec<(String, std::result::Result<f64, String>)>> = cases
        .par_iter()
        .map(|inst| {
            let b = inst.batch();
            let d_out = cotangent(inst);
            configs
                .iter()
                .filter_map(|cfg| {
                    let label = format!(
                        "{} gamma={} lambda={} normalize={}",
                        inst.describe(opts.seed),
                        cfg.gamma,
                        cfg.lambda,
                        cfg.normalize
                    );
                    let fwd = hla2_forward(&b, cfg).ok()?;
                    if !den_above(&fwd, cfg, FD_DEN_STEPS * FD_STEP) {
                        return None;
                    }
                    let res = match (
                        hla2_backward(&b, cfg, &d_out),
                        fd_gradient(&b, cfg, &d_out, FD_STEP),
                    ) {
                        (Ok(mut g), Ok(fd)) => {
                            if opts.faulty(SUITE) {
                                g.dq.as_mut_slice()[0] += 1e-3;
                            }
                            Ok([
                                max_rel_err(&g.dq, &fd.dq).unwrap(),
                                max_rel_err(&g.dk, &fd.dk).unwrap(),
                                max_rel_err(&g.dv, &fd.dv).unwrap(),
                            ]
                            .into_iter()
                            .fold(0.0, f64::max))
                        }
                        (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
                    };
                    Some((label, res))
                })
                .collect()
        })
        .collect();
    let mut tally = Tally::new(SUITE);
    tally.trials = cases.len();
    for (label, res) in results.into_iter().flatten() {
        match res {
            Ok(err) => tally.record(err, GRAD_FD_TOL, || label),
            Err(e) => tally.fail(format!("{label}: {e}")),
        }
    }
    tally.finish()
}

/// At `gamma = 1`, unnormalized: `dV = ((W W^T) ⊙ L)^T dO`.
pub fn gradient_v_adjoint(opts: &CheckOptions) -> SuiteReport {
    const SUITE: &str = "gradient-v-adjoint";
    let cases = instances(
        opts,
        SUITE,
        opts.share(4),
        opts.max_n,
        opts.max_d,
        opts.max_dv,
    );
    let mut tally = Tally::new(SUITE);
    tally.trials = cases.len();
    for inst in &cases {
        let b = inst.batch();
        let d_out = cotangent(inst);
        let mut g = hla2_backward(&b, &KernelConfig::default(), &d_out).unwrap();
        if opts.faulty(SUITE) {
            g.dv.as_mut_slice()[0] += 1e-3;
        }
        let want = oracle_hla2_value_adjoint(&b, &d_out).unwrap();
        tally.record(max_rel_err(&g.dv, &want).unwrap(), GRAD_V_TOL, || {
            inst.describe(opts.seed)
        });
    }
    tally.finish()
}

pub fn run_suite(name: &str, opts: &CheckOptions) -> Option<SuiteReport> {
    Some(match name {
        "hla2-oracle" => hla2_oracle(opts),
        "ahla-oracle" => ahla_oracle(opts),
        "hla3-oracle" => hla3_oracle(opts),
        "scan-serial" => scan_serial(opts),
        "monoid-laws" => monoid_laws(opts),
        "golden-w1" => golden_w1(opts),
        "causality" => causality(opts),
        "homogeneity" => homogeneity(opts),
        "linattn-reduction" => linattn_reduction(opts),
        "t2-factorization" => t2_factorization(opts),
        "gradient-fd" => gradient_fd(opts),
        "gradient-v-adjoint" => gradient_v_adjoint(opts),
        _ => return None,
    })
}

/// Every suite, in the fixed order of [`SUITES`].
pub fn run_all(opts: &CheckOptions) -> Vec<SuiteReport> {
    SUITES
        .iter()
        .map(|name| run_suite(name, opts).expect("known suite"))
        .collect()
}
