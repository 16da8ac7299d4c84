//! Command-line surface: `verify`, `bench`, `sweep`, `train`, `connectivity`.
//!
//! Exit codes: 0 success, 1 check failure (tolerance exceeded, training
//! diverged), 2 usage error (bad flags, bad dimensions, unreadable inputs).
//! `DYAD_SEED` supplies the seed when `--seed` is absent.

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::builder::RangedU64ValueParser;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bench::{self, SweepOptions};
use crate::error::Error;
use crate::layer::{DyadConfig, DyadLayer, Variant};
use crate::mnist::{self, HiddenKind, MlpModel, Split, TrainConfig, TrainMeta};
use crate::oracle;
use crate::tensor::{Matrix, Scalar};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const SEED_ENV: &str = "DYAD_SEED";
pub const MNIST_DIR_ENV: &str = "DYAD_MNIST_DIR";

#[derive(Debug, Parser)]
#[command(name = "dyad", version, about = "Dyad structured-sparse linear layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check forward and backward passes against the dense oracle.
    Verify(VerifyArgs),
    /// Time one layer against its dense counterpart; CSV output.
    Bench(BenchArgs),
    /// Time feed-forward pairs over a list of widths; CSV output.
    Sweep(SweepArgs),
    /// Train an MLP on MNIST; per-epoch metrics CSV plus a checkpoint.
    Train(TrainArgs),
    /// Count input-to-output paths through two stacked layers; CSV output.
    Connectivity(ConnectivityArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VerifyVariant {
    It,
    Ot,
    Dt,
    Cat,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchVariant {
    Dense,
    It,
    Ot,
    Dt,
    Cat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LayerKind {
    Dense,
    DyadIt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PlainVariant {
    It,
    Ot,
    Dt,
}

impl From<PlainVariant> for Variant {
    fn from(v: PlainVariant) -> Self {
        match v {
            PlainVariant::It => Variant::It,
            PlainVariant::Ot => Variant::Ot,
            PlainVariant::Dt => Variant::Dt,
        }
    }
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    variant: VerifyVariant,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    n_dyad: u32,
    /// Per-block input width.
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..))]
    n_in: u32,
    /// Per-block output width.
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..))]
    n_out: u32,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    batch: u32,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
    /// Largest accepted normwise relative error.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "it")]
    variant: BenchVariant,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    n_dyad: u32,
    #[arg(long, default_value_t = 768, value_parser = clap::value_parser!(u32).range(1..))]
    f_in: u32,
    #[arg(long, default_value_t = 3072, value_parser = clap::value_parser!(u32).range(1..))]
    f_out: u32,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..))]
    batch: u32,
    #[arg(long, default_value_t = bench::DEFAULT_TIMED, value_parser = RangedU64ValueParser::<usize>::new().range(10..))]
    iters: usize,
    #[arg(long, default_value_t = bench::DEFAULT_WARMUP, value_parser = RangedU64ValueParser::<usize>::new().range(1..))]
    warmup: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Comma-separated model widths; each is timed as `w -> 4w -> w`.
    #[arg(long, value_delimiter = ',', default_value = "768,1024,1536,2048")]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    n_dyad: u32,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..))]
    batch: u32,
    #[arg(long, value_enum, default_value = "it")]
    variant: BenchVariant,
    #[arg(long, default_value_t = bench::DEFAULT_TIMED, value_parser = RangedU64ValueParser::<usize>::new().range(10..))]
    iters: usize,
    #[arg(long, default_value_t = bench::DEFAULT_WARMUP, value_parser = RangedU64ValueParser::<usize>::new().range(1..))]
    warmup: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory holding the four MNIST IDX files. Defaults to
    /// `$DYAD_MNIST_DIR`, then `data/mnist`.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "dense")]
    layer: LayerKind,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    n_dyad: u32,
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u32).range(1..))]
    hidden: u32,
    #[arg(long, default_value_t = 5)]
    epochs: u32,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..))]
    batch_size: u32,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
    /// Use only the first N training examples.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Use only the first N test examples.
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Write the metrics CSV here instead of stdout.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConnectivityArgs {
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    n_dyad: u32,
    /// Per-block width (square layers).
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..))]
    n: u32,
    #[arg(long, value_enum, default_value = "it")]
    variant: PlainVariant,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failed subcommand, already mapped to its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Diverged { .. } => EXIT_CHECK_FAILED,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::from(e).into()
    }
}

type CmdResult = std::result::Result<i32, Failure>;

/// Runs the CLI, reading `DYAD_SEED` and `DYAD_MNIST_DIR` from the process
/// environment.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let env = Env {
        seed: std::env::var(SEED_ENV).ok(),
        mnist_dir: std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from),
    };
    run_with_env(args, &env, out, err)
}

/// Environment inputs, injectable for tests.
#[derive(Debug, Clone, Default)]
pub struct Env {
    pub seed: Option<String>,
    pub mnist_dir: Option<PathBuf>,
}

pub fn run_with_env<I, S>(args: I, env: &Env, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Verify(a) => cmd_verify(&a, env, out),
        Command::Bench(a) => cmd_bench(&a, env, out),
        Command::Sweep(a) => cmd_sweep(&a, env, out),
        Command::Train(a) => cmd_train(&a, env, out, err),
        Command::Connectivity(a) => cmd_connectivity(&a, out, err),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn resolve_seed(flag: Option<u64>, env: &Env) -> std::result::Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match &env.seed {
        None => Ok(0),
        Some(raw) => raw.trim().parse().map_err(|_| Failure {
            code: EXIT_USAGE,
            message: format!("{SEED_ENV}={raw:?} is not an unsigned integer"),
        }),
    }
}

/// Writes to `--out` when given, else to `out`.
fn with_sink(
    path: &Option<PathBuf>,
    out: &mut dyn Write,
    f: impl FnOnce(&mut dyn Write) -> crate::Result<()>,
) -> std::result::Result<(), Failure> {
    match path {
        Some(p) => {
            let mut file = io::BufWriter::new(File::create(p)?);
            f(&mut file)?;
            file.flush()?;
        }
        None => f(out)?,
    }
    Ok(())
}

fn random_matrix<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let dist = Uniform::new_inclusive(T::from_f64(-1.0), T::from_f64(1.0));
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

fn verify_one<T: Scalar>(
    variant: Variant,
    fused_cat: bool,
    a: &VerifyArgs,
    seed: u64,
    out: &mut dyn Write,
) -> std::result::Result<bool, Failure> {
    let cfg = DyadConfig::new(
        a.n_dyad as usize,
        a.n_in as usize,
        a.n_out as usize,
        variant,
    )?
    .with_cat(fused_cat);
    let layer = DyadLayer::<T>::init_uniform(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let x = random_matrix::<T>(cfg.f_in(), a.batch as usize, &mut rng);
    let d_y = random_matrix::<T>(cfg.f_out(), a.batch as usize, &mut rng);

    let y = layer.forward(&x)?;
    let got = layer.backward(&x, &d_y)?;
    let want = oracle::dense_gradients(&layer, &x, &d_y)?;
    let as_matrix =
        |t: &crate::Tensor3<T>| Matrix::new(1, t.len(), t.to_vec()).expect("flat tensor");
    let mut checks = vec![
        (
            "forward",
            oracle::normwise_relative_error(&y, &oracle::dense_forward(&layer, &x)?),
        ),
        (
            "d_w1",
            oracle::normwise_relative_error(&as_matrix(&got.d_w1), &as_matrix(&want.d_w1)),
        ),
        (
            "d_w2",
            oracle::normwise_relative_error(&as_matrix(&got.d_w2), &as_matrix(&want.d_w2)),
        ),
        ("d_x", oracle::normwise_relative_error(&got.d_x, &want.d_x)),
    ];
    if let (Some(g), Some(w)) = (&got.d_bias, &want.d_bias) {
        checks.push(("d_bias", oracle::normwise_relative_error(g, w)));
    }

    let name = if fused_cat { "it-cat" } else { variant.name() };
    let mut ok = true;
    for (check, e) in checks {
        let pass = e <= a.tol;
        ok &= pass;
        writeln!(
            out,
            "{name:<6} {check:<8} {:<3} max_rel_err={e:.3e} tol={:.1e} {}",
            T::NAME,
            a.tol,
            if pass { "ok" } else { "FAIL" }
        )?;
    }
    Ok(ok)
}

fn cmd_verify(a: &VerifyArgs, env: &Env, out: &mut dyn Write) -> CmdResult {
    if a.tol.is_nan() || a.tol < 0.0 {
        return Err(Failure {
            code: EXIT_USAGE,
            message: format!("--tol must be non-negative, got {}", a.tol),
        });
    }
    let seed = resolve_seed(a.seed, env)?;
    let cases: Vec<(Variant, bool)> = match a.variant {
        VerifyVariant::It => vec![(Variant::It, false)],
        VerifyVariant::Ot => vec![(Variant::Ot, false)],
        VerifyVariant::Dt => vec![(Variant::Dt, false)],
        VerifyVariant::Cat => vec![(Variant::It, true)],
        VerifyVariant::All => vec![
            (Variant::It, false),
            (Variant::Ot, false),
            (Variant::Dt, false),
            (Variant::It, true),
        ],
    };
    let mut ok = true;
    for (v, cat) in cases {
        ok &= match a.precision {
            Precision::F32 => verify_one::<f32>(v, cat, a, seed, out)?,
            Precision::F64 => verify_one::<f64>(v, cat, a, seed, out)?,
        };
    }
    Ok(if ok { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn bench_variant(v: BenchVariant) -> (Option<Variant>, bool) {
    match v {
        BenchVariant::Dense => (None, false),
        BenchVariant::It => (Some(Variant::It), false),
        BenchVariant::Ot => (Some(Variant::Ot), false),
        BenchVariant::Dt => (Some(Variant::Dt), false),
        BenchVariant::Cat => (Some(Variant::It), true),
    }
}

fn bench_records<T: Scalar>(a: &BenchArgs, seed: u64) -> crate::Result<Vec<bench::BenchRecord>> {
    let (f_out, f_in, batch) = (a.f_out as usize, a.f_in as usize, a.batch as usize);
    let (variant, cat) = bench_variant(a.variant);
    let dense_layer = bench::build_layer::<T>(None, false, 1, f_out, f_in, seed)?;
    let dense = bench::time_layer(&dense_layer, batch, a.warmup, a.iters, seed + 1)?;
    if variant.is_none() {
        return Ok(vec![dense]);
    }
    let layer = bench::build_layer::<T>(variant, cat, a.n_dyad as usize, f_out, f_in, seed)?;
    let rec =
        bench::time_layer(&layer, batch, a.warmup, a.iters, seed + 1)?.with_speedup_over(&dense);
    Ok(vec![dense, rec])
}

fn cmd_bench(a: &BenchArgs, env: &Env, out: &mut dyn Write) -> CmdResult {
    let seed = resolve_seed(a.seed, env)?;
    let records = match a.precision {
        Precision::F32 => bench_records::<f32>(a, seed)?,
        Precision::F64 => bench_records::<f64>(a, seed)?,
    };
    with_sink(&a.out, out, |w| bench::write_csv(&records, w))?;
    Ok(EXIT_OK)
}

fn cmd_sweep(a: &SweepArgs, env: &Env, out: &mut dyn Write) -> CmdResult {
    let (variant, fused_cat) =
        match bench_variant(a.variant) {
            (Some(v), cat) => (v, cat),
            (None, _) => return Err(Failure {
                code: EXIT_USAGE,
                message:
                    "sweep compares a Dyad variant against dense; --variant dense is not allowed"
                        .into(),
            }),
        };
    let opts = SweepOptions {
        n_dyad: a.n_dyad as usize,
        batch: a.batch as usize,
        warmup_iters: a.warmup,
        timed_iters: a.iters,
        seed: resolve_seed(a.seed, env)?,
        variant,
        fused_cat,
    };
    let records = match a.precision {
        Precision::F32 => bench::width_sweep::<f32>(&a.widths, &opts)?,
        Precision::F64 => bench::width_sweep::<f64>(&a.widths, &opts)?,
    };
    with_sink(&a.out, out, |w| bench::write_csv(&records, w))?;
    Ok(EXIT_OK)
}

fn train_typed<T: Scalar>(
    a: &TrainArgs,
    dir: &std::path::Path,
    seed: u64,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CmdResult {
    let mut train_set = mnist::load_split::<T>(dir, Split::Train)?;
    let mut test_set = mnist::load_split::<T>(dir, Split::Test)?;
    if let Some(n) = a.train_limit {
        train_set = train_set.head(n)?;
    }
    if let Some(n) = a.test_limit {
        test_set = test_set.head(n)?;
    }
    let kind = match a.layer {
        LayerKind::Dense => HiddenKind::Dense,
        LayerKind::DyadIt => HiddenKind::DyadIt {
            n_dyad: a.n_dyad as usize,
        },
    };
    let model = MlpModel::<T>::new(train_set.features(), a.hidden as usize, kind, seed)?;
    writeln!(
        err,
        "{} hidden layer, {} parameters, {} train / {} test examples",
        model.layer1.tag(),
        model.param_count(),
        train_set.len(),
        test_set.len()
    )?;
    let cfg = TrainConfig {
        epochs: a.epochs as usize,
        lr: a.lr,
        batch_size: a.batch_size as usize,
        seed,
    };
    let (model, mut metrics) = mnist::train(model, &train_set, Some(&test_set), &cfg)?;
    if metrics.is_empty() {
        metrics.push(mnist::EpochMetrics {
            epoch: 0,
            train_loss: f64::NAN,
            test_accuracy: mnist::evaluate(&model, &test_set)?,
        });
    }
    let csv = mnist::metrics_csv(&metrics);
    match &a.metrics {
        Some(p) => std::fs::write(p, &csv)?,
        None => out.write_all(csv.as_bytes())?,
    }
    if let Some(path) = &a.checkpoint {
        let last = metrics.last().expect("at least one row");
        let meta = TrainMeta {
            epoch: last.epoch as u32,
            seed,
            final_loss: last.train_loss,
        };
        mnist::save_checkpoint(&model, &meta, path)?;
    }
    Ok(EXIT_OK)
}

fn cmd_train(a: &TrainArgs, env: &Env, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let seed = resolve_seed(a.seed, env)?;
    if !(a.lr >= 0.0 && a.lr.is_finite()) {
        return Err(Failure {
            code: EXIT_USAGE,
            message: format!("--lr must be a non-negative number, got {}", a.lr),
        });
    }
    let dir = a
        .data_dir
        .clone()
        .or_else(|| env.mnist_dir.clone())
        .unwrap_or_else(|| PathBuf::from("data/mnist"));
    match a.precision {
        Precision::F32 => train_typed::<f32>(a, &dir, seed, out, err),
        Precision::F64 => train_typed::<f64>(a, &dir, seed, out, err),
    }
}

fn cmd_connectivity(a: &ConnectivityArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let table = oracle::count_paths(a.n_dyad as usize, a.n as usize, a.variant.into());
    with_sink(&a.out, out, |w| table.write_csv(w))?;
    writeln!(
        err,
        "same-block mean {:.4}, cross-block mean {:.4}, dense {}",
        table.same_block_mean(),
        table.cross_block_mean(),
        table.dense_baseline()
    )?;
    Ok(EXIT_OK)
}
