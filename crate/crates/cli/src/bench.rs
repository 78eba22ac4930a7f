//! Wall-clock measurements behind `hla bench`.

use std::time::Instant;

use hla_core::{gauss_tokens, KernelConfig, Result};
use serde::Serialize;

use crate::kernels::Kernel;

#[derive(Clone, Debug, Serialize)]
pub struct BenchRecord {
    pub kernel: String,
    pub n: usize,
    pub d: usize,
    pub dv: usize,
    pub gamma: f64,
    pub chunk_width: usize,
    pub reps: usize,
    pub median_s: f64,
    pub tokens_per_s: f64,
}

pub const CSV_HEADER: &str = "kernel,n,d,dv,gamma,chunk_width,reps,median_s,tokens_per_s";

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.9},{:.3}",
            self.kernel,
            self.n,
            self.d,
            self.dv,
            self.gamma,
            self.chunk_width,
            self.reps,
            self.median_s,
            self.tokens_per_s
        )
    }
}

#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub kernel: Kernel,
    pub d: usize,
    pub dv: usize,
    pub reps: usize,
    pub gamma: f64,
    pub chunk_width: usize,
    pub seed: u64,
}

pub fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let mid = samples.len() / 2;
    if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        0.5 * (samples[mid - 1] + samples[mid])
    }
}

/// Median wall time of `spec.reps` runs at sequence length `n`, after one
/// untimed warm-up run.
pub fn measure(spec: &BenchSpec, n: usize) -> Result<BenchRecord> {
    let batch = gauss_tokens(spec.seed, n, spec.d, spec.dv, 1.0 / (spec.d as f64).sqrt())?;
    let cfg = KernelConfig::default()
        .with_gamma(spec.gamma)
        .with_chunk_width(spec.chunk_width);
    std::hint::black_box(spec.kernel.run(&batch, &cfg)?);
    let mut samples = Vec::with_capacity(spec.reps);
    for _ in 0..spec.reps {
        let start = Instant::now();
        std::hint::black_box(spec.kernel.run(&batch, &cfg)?);
        samples.push(start.elapsed().as_secs_f64());
    }
    let median_s = median(&mut samples);
    Ok(BenchRecord {
        kernel: spec.kernel.name().to_string(),
        n,
        d: spec.d,
        dv: spec.dv,
        gamma: spec.gamma,
        chunk_width: spec.chunk_width,
        reps: spec.reps,
        median_s,
        tokens_per_s: n as f64 / median_s.max(f64::MIN_POSITIVE),
    })
}
