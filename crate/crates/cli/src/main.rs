use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use hla_cli::bench::{measure, BenchSpec, CSV_HEADER};
use hla_cli::kernels::Kernel;
use hla_cli::suites::{run_all, CheckOptions};
use hla_core::tensor_io::{read_tensor, write_tensor, write_tensor_as};
use hla_core::{gauss_tokens, Dtype, HlaError, KernelConfig, TokenBatch};

#[derive(Parser)]
#[command(name = "hla", version, about = "Higher-order linear attention kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Dtype {
        match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F64 => Dtype::F64,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Write Gaussian Q, K, V as PREFIX.{q,k,v}.hot
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        dv: usize,
        /// Standard deviation of every entry [default: 1/sqrt(d)]
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        out_prefix: PathBuf,
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DtypeArg,
    },
    /// Run one kernel on tensors read from disk
    Run {
        #[arg(long)]
        q: PathBuf,
        #[arg(long)]
        k: PathBuf,
        #[arg(long)]
        v: PathBuf,
        #[arg(long, value_enum)]
        kernel: Kernel,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        #[arg(long)]
        normalize: bool,
        #[arg(long, default_value_t = 64)]
        chunk_width: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the denominators when not normalizing
        #[arg(long)]
        emit_den: bool,
        /// Metric replacing S + lambda*I (hla2-unmasked only)
        #[arg(long)]
        metric: Option<PathBuf>,
    },
    /// Run every verification suite and print a JSON report
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 64)]
        max_n: usize,
        #[arg(long, default_value_t = 8)]
        max_d: usize,
        #[arg(long, default_value_t = 8)]
        max_dv: usize,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Median wall time per sequence length
    Bench {
        #[arg(long, value_enum)]
        kernel: Kernel,
        #[arg(long, value_delimiter = ',', required = true)]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 64)]
        dv: usize,
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(3..))]
        reps: u64,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 64)]
        chunk_width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

fn exit_code(err: &HlaError) -> u8 {
    match err {
        HlaError::ShapeMismatch(_) | HlaError::InvalidDimensions(_) => 3,
        HlaError::OracleUndefined => 4,
        HlaError::InvalidConfig(_) => 2,
        _ => 1,
    }
}

fn fail(err: HlaError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_code(&err))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn den_path(out: &Path) -> PathBuf {
    let s = out.to_string_lossy();
    let stem = s.strip_suffix(".hot").unwrap_or(&s);
    PathBuf::from(format!("{stem}.den.hot"))
}

fn gen(
    seed: u64,
    n: usize,
    d: usize,
    dv: usize,
    scale: Option<f64>,
    prefix: &Path,
    dtype: Dtype,
) -> hla_core::Result<()> {
    let scale = scale.unwrap_or(1.0 / (d.max(1) as f64).sqrt());
    let batch = gauss_tokens(seed, n, d, dv, scale)?;
    for (tag, m) in [("q", batch.q()), ("k", batch.k()), ("v", batch.v())] {
        write_tensor_as(with_suffix(prefix, &format!(".{tag}.hot")), m, dtype)?;
    }
    Ok(())
}

fn run(
    paths: [&Path; 3],
    kernel: Kernel,
    cfg: KernelConfig,
    metric: Option<&Path>,
    out: &Path,
    emit_den: bool,
) -> hla_core::Result<()> {
    let [q, k, v] = paths.map(read_tensor);
    let batch = TokenBatch::new(q?, k?, v?)?;
    let cfg = match metric {
        Some(p) => cfg.with_metric_override(read_tensor(p)?),
        None => cfg,
    };
    let start = Instant::now();
    let result = kernel.run(&batch, &cfg)?;
    let elapsed = start.elapsed().as_secs_f64();
    write_tensor(out, &result.o)?;
    if cfg.normalize || emit_den {
        if let Some(den) = result.den_matrix() {
            write_tensor(den_path(out), &den)?;
        }
    }
    println!(
        "n={} d={} d_v={} kernel={} wall_s={elapsed:.6}",
        batch.len(),
        batch.d(),
        batch.d_v(),
        kernel
    );
    Ok(())
}

fn check(opts: CheckOptions) -> ExitCode {
    let reports = run_all(&opts);
    println!(
        "{}",
        serde_json::to_string_pretty(&reports).expect("reports serialize")
    );
    let mut ok = true;
    for r in reports.iter().filter(|r| !r.pass) {
        ok = false;
        eprintln!(
            "FAIL suite={} seed={} max_rel_err={:e}: {}",
            r.suite,
            opts.seed,
            r.max_rel_err,
            r.failure.as_deref().unwrap_or("no detail")
        );
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn bench(spec: BenchSpec, n_list: &[usize], format: Format) -> hla_core::Result<()> {
    if matches!(format, Format::Csv) {
        println!("{CSV_HEADER}");
    }
    let mut prev: Option<(usize, f64)> = None;
    for &n in n_list {
        let rec = measure(&spec, n)?;
        match format {
            Format::Csv => println!("{}", rec.csv_row()),
            Format::Json => println!(
                "{}",
                serde_json::to_string(&rec).expect("record serializes")
            ),
        }
        if let Some((pn, pt)) = prev {
            eprintln!("ratio n {pn} -> {n}: {:.3}", rec.median_s / pt);
        }
        prev = Some((n, rec.median_s));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Gen {
            seed,
            n,
            d,
            dv,
            scale,
            out_prefix,
            dtype,
        } => gen(seed, n, d, dv, scale, &out_prefix, dtype.into()),
        Command::Run {
            q,
            k,
            v,
            kernel,
            gamma,
            eps,
            lambda,
            normalize,
            chunk_width,
            out,
            emit_den,
            metric,
        } => {
            let cfg = KernelConfig::default()
                .with_gamma(gamma)
                .with_eps(eps)
                .with_lambda(lambda)
                .with_normalize(normalize)
                .with_chunk_width(chunk_width);
            run([&q, &k, &v], kernel, cfg, metric.as_deref(), &out, emit_den)
        }
        Command::Check {
            seed,
            trials,
            max_n,
            max_d,
            max_dv,
            inject_fault,
        } => {
            return check(CheckOptions {
                seed,
                trials,
                max_n,
                max_d,
                max_dv,
                inject_fault,
            });
        }
        Command::Bench {
            kernel,
            n_list,
            d,
            dv,
            reps,
            gamma,
            chunk_width,
            seed,
            format,
        } => {
            let spec = BenchSpec {
                kernel,
                d,
                dv,
                reps: reps as usize,
                gamma,
                chunk_width,
                seed,
            };
            bench(spec, &n_list, format)
        }
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
