//! Per-minibatch timing of linear layers, forward and backward.
//!
//! Timings are wall-clock means over the timed iterations. Inputs are drawn
//! fresh for every iteration outside the timed region, and every output is
//! folded into a checksum passed through [`std::hint::black_box`] so no phase
//! can be optimized away. Runs are single-threaded; background load skews
//! results.

use std::hint::black_box;
use std::io::{Read, Write};
use std::time::Instant;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::Result;
use crate::layer::{validate_dims, DenseLayer, DyadConfig, DyadLayer, Linear, Variant};
use crate::tensor::{Matrix, Scalar};

pub const DEFAULT_WARMUP: usize = 20;
pub const DEFAULT_TIMED: usize = 200;

/// One timed measurement row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub variant: String,
    pub n_dyad: usize,
    pub f_in: usize,
    pub f_out: usize,
    pub batch: usize,
    #[serde(serialize_with = "six_significant")]
    pub fwd_ms: f64,
    #[serde(serialize_with = "six_significant")]
    pub bwd_ms: f64,
    #[serde(serialize_with = "six_significant")]
    pub total_ms: f64,
    #[serde(serialize_with = "six_significant")]
    pub speedup: f64,
}

/// Formats with six significant digits in scientific notation.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return v.to_string();
    }
    format!("{v:.5e}")
}

fn six_significant<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format_sig6(*v))
}

impl BenchRecord {
    /// Sets `speedup` relative to a dense reference record.
    pub fn with_speedup_over(mut self, dense: &BenchRecord) -> Self {
        self.speedup = dense.total_ms / self.total_ms;
        self
    }
}

pub fn write_csv<W: Write>(records: &[BenchRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record([
            "variant", "n_dyad", "f_in", "f_out", "batch", "fwd_ms", "bwd_ms", "total_ms",
            "speedup",
        ])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<BenchRecord>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn n_dyad_of<T: Scalar>(layer: &Linear<T>) -> usize {
    match layer {
        Linear::Dense(_) => 1,
        Linear::Dyad(l) => l.config().n_dyad,
    }
}

/// Accumulated phase times for one layer, in seconds.
#[derive(Debug, Clone, Copy, Default)]
struct PhaseTimes {
    fwd: f64,
    bwd: f64,
}

fn time_phases<T: Scalar>(
    layer: &Linear<T>,
    batch: usize,
    warmup_iters: usize,
    timed_iters: usize,
    seed: u64,
) -> Result<PhaseTimes> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(T::from_f64(-1.0), T::from_f64(1.0));
    let f_in = layer.f_in();
    let mut sink = T::zero();
    let mut times = PhaseTimes::default();

    for iter in 0..warmup_iters + timed_iters {
        let x = Matrix::new(
            f_in,
            batch,
            (0..f_in * batch).map(|_| dist.sample(&mut rng)).collect(),
        )?;

        let start = Instant::now();
        let y = black_box(layer.forward(black_box(&x))?);
        let fwd = start.elapsed().as_secs_f64();

        // Gradient of 0.5 * ||Y||^2 is Y itself.
        let start = Instant::now();
        let grads = black_box(layer.backward(&x, &y)?);
        let bwd = start.elapsed().as_secs_f64();

        sink = sink + y.as_slice()[0] + grads.d_x().as_slice()[0];
        if iter >= warmup_iters {
            times.fwd += fwd;
            times.bwd += bwd;
        }
    }
    black_box(sink);
    Ok(times)
}

/// Times `warmup_iters` untimed then `timed_iters` timed forward+backward
/// passes. The returned record has `speedup = 1`; compare against a dense
/// record with [`BenchRecord::with_speedup_over`].
pub fn time_layer<T: Scalar>(
    layer: &Linear<T>,
    batch: usize,
    warmup_iters: usize,
    timed_iters: usize,
    seed: u64,
) -> Result<BenchRecord> {
    assert!(warmup_iters >= 1, "at least one warmup iteration");
    assert!(timed_iters >= 10, "at least ten timed iterations");
    let t = time_phases(layer, batch, warmup_iters, timed_iters, seed)?;
    Ok(record(
        layer,
        layer.f_in(),
        layer.f_out(),
        batch,
        t,
        timed_iters,
    ))
}

fn record<T: Scalar>(
    layer: &Linear<T>,
    f_in: usize,
    f_out: usize,
    batch: usize,
    t: PhaseTimes,
    timed_iters: usize,
) -> BenchRecord {
    let fwd_ms = t.fwd * 1e3 / timed_iters as f64;
    let bwd_ms = t.bwd * 1e3 / timed_iters as f64;
    BenchRecord {
        variant: layer.tag(),
        n_dyad: n_dyad_of(layer),
        f_in,
        f_out,
        batch,
        fwd_ms,
        bwd_ms,
        total_ms: fwd_ms + bwd_ms,
        speedup: 1.0,
    }
}

/// Builds a layer of the requested kind at full dims `f_out x f_in`.
/// `variant = None` means dense.
pub fn build_layer<T: Scalar>(
    variant: Option<Variant>,
    fused_cat: bool,
    n_dyad: usize,
    f_out: usize,
    f_in: usize,
    seed: u64,
) -> Result<Linear<T>> {
    Ok(match variant {
        None => Linear::Dense(DenseLayer::init_uniform(f_out, f_in, true, seed)),
        Some(v) => {
            let cfg = DyadConfig::for_dims(f_out, f_in, n_dyad, v)?.with_cat(fused_cat);
            Linear::Dyad(DyadLayer::init_uniform(cfg, seed))
        }
    })
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub n_dyad: usize,
    pub batch: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub seed: u64,
    /// Dyad variant compared against dense.
    pub variant: Variant,
    pub fused_cat: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            n_dyad: 4,
            batch: 64,
            warmup_iters: DEFAULT_WARMUP,
            timed_iters: DEFAULT_TIMED,
            seed: 0,
            variant: Variant::It,
            fused_cat: false,
        }
    }
}

/// Times a feed-forward pair (`width -> 4 * width` and back) for dense and
/// Dyad layers at each width. Emits one dense and one Dyad record per width,
/// each with `f_in = width`, `f_out = 4 * width` and the two projections'
/// times summed.
pub fn width_sweep<T: Scalar>(widths: &[usize], opts: &SweepOptions) -> Result<Vec<BenchRecord>> {
    for &w in widths {
        validate_dims(4 * w, w, opts.n_dyad)?;
    }
    let mut out = Vec::with_capacity(2 * widths.len());
    for (wi, &width) in widths.iter().enumerate() {
        let seed = opts.seed.wrapping_add(wi as u64 * 1000);
        let pair = |variant: Option<Variant>| -> Result<BenchRecord> {
            let up =
                build_layer::<T>(variant, opts.fused_cat, opts.n_dyad, 4 * width, width, seed)?;
            let down = build_layer::<T>(
                variant,
                opts.fused_cat,
                opts.n_dyad,
                width,
                4 * width,
                seed + 1,
            )?;
            let a = time_phases(
                &up,
                opts.batch,
                opts.warmup_iters,
                opts.timed_iters,
                seed + 2,
            )?;
            let b = time_phases(
                &down,
                opts.batch,
                opts.warmup_iters,
                opts.timed_iters,
                seed + 3,
            )?;
            let t = PhaseTimes {
                fwd: a.fwd + b.fwd,
                bwd: a.bwd + b.bwd,
            };
            Ok(record(
                &up,
                width,
                4 * width,
                opts.batch,
                t,
                opts.timed_iters,
            ))
        };
        let dense = pair(None)?;
        let dyad = pair(Some(opts.variant))?.with_speedup_over(&dense);
        out.push(dense);
        out.push(dyad);
    }
    Ok(out)
}
