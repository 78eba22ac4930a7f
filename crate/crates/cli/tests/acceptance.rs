//! One line per acceptance criterion. Exits nonzero if any hard criterion
//! fails; the scaling criterion is printed but never gates.
//!
//! Set `HLA_SKIP_SCALING=1` to skip the timing run.

use std::process::ExitCode;
use std::time::Instant;

use hla_cli::bench::median;
use hla_cli::kernels::Kernel;
use hla_cli::suites::{run_suite, CheckOptions, SuiteReport};
use hla_core::{gauss_tokens, KernelConfig};

const HARD: [(&str, &str); 11] = [
    ("masked second-order oracle", "hla2-oracle"),
    ("AHLA oracle", "ahla-oracle"),
    ("third-order oracle", "hla3-oracle"),
    ("scan matches serial", "scan-serial"),
    ("monoid laws", "monoid-laws"),
    ("golden W1", "golden-w1"),
    ("causality", "causality"),
    ("homogeneity", "homogeneity"),
    ("linear-attention reduction", "linattn-reduction"),
    ("factorization identity", "t2-factorization"),
    ("gradient", "gradient-fd"),
];

fn line(pass: bool, idx: usize, name: &str, detail: &str) {
    println!(
        "[{}] {idx}. {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn describe(r: &SuiteReport) -> String {
    let mut s = format!(
        "{} max_rel_err={:.3e} over {} trials",
        r.suite, r.max_rel_err, r.trials
    );
    if let Some(f) = &r.failure {
        s.push_str(&format!(" ({f})"));
    }
    s
}

/// Median seconds of `reps` runs at length `n`, d = d_v = 64.
fn time(kernel: Kernel, n: usize, reps: usize) -> f64 {
    let batch = gauss_tokens(0, n, 64, 64, 0.125).unwrap();
    let cfg = KernelConfig::default();
    let mut samples: Vec<f64> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            std::hint::black_box(kernel.run(&batch, &cfg).unwrap());
            start.elapsed().as_secs_f64()
        })
        .collect();
    median(&mut samples)
}

fn scaling() -> (bool, String) {
    let streaming = time(Kernel::Hla2, 8192, 3) / time(Kernel::Hla2, 4096, 3);
    let oracle = time(Kernel::OracleHla2, 2048, 1) / time(Kernel::OracleHla2, 1024, 1);
    let ok = (1.5..=2.7).contains(&streaming) && oracle >= 3.2;
    (ok, format!("hla2 4096->8192 x{streaming:.2} (want 1.5..2.7), oracle 1024->2048 x{oracle:.2} (want >= 3.2)"))
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture are accepted and ignored
    let opts = CheckOptions::default();
    let mut failed = 0;
    for (i, (name, suite)) in HARD.iter().enumerate() {
        let idx = i + 1;
        let mut reports = vec![run_suite(suite, &opts).expect("known suite")];
        if *suite == "gradient-fd" {
            reports.push(run_suite("gradient-v-adjoint", &opts).expect("known suite"));
        }
        let pass = reports.iter().all(|r| r.pass);
        failed += usize::from(!pass);
        let detail: Vec<_> = reports.iter().map(describe).collect();
        line(pass, idx, name, &detail.join("; "));
    }
    if std::env::var_os("HLA_SKIP_SCALING").is_some() {
        println!("[SKIP] 12. complexity scaling (informational)");
    } else {
        let (ok, detail) = scaling();
        line(ok, 12, "complexity scaling (informational)", &detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} hard criteria failed");
        ExitCode::FAILURE
    }
}
