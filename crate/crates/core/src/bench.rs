//! Forward-pass timing and allocation high-water marks for the three
//! rescalers.
//!
//! Peak memory is read from [`TrackingAllocator`], which must be installed
//! as the global allocator by the final binary:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: coda_core::bench::TrackingAllocator = coda_core::bench::TrackingAllocator;
//! ```
//!
//! Without it, `peak_bytes` is reported as 0.

use std::alloc::{GlobalAlloc, Layout, System};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dau::RescaleKind;
use crate::error::{contract_err, Error, Result};
use crate::net::{CodaNet, NetConfig};
use crate::tensor::Tensor;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static INSTALLED: AtomicBool = AtomicBool::new(false);

/// System allocator wrapper counting live bytes and their maximum.
pub struct TrackingAllocator;

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            record_alloc(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            record_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
            record_alloc(new_size);
        }
        p
    }
}

fn record_alloc(size: usize) {
    INSTALLED.store(true, Ordering::Relaxed);
    let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

/// Whether any allocation has gone through [`TrackingAllocator`].
pub fn tracking_enabled() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

/// Bytes currently allocated through the tracker.
pub fn allocated_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// Restarts the high-water mark at the current level and returns that level.
pub fn reset_peak() -> usize {
    let now = CURRENT.load(Ordering::Relaxed);
    PEAK.store(now, Ordering::Relaxed);
    now
}

pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub variant: RescaleKind,
    pub batch: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Largest increase of live bytes over the pre-call level, across reps.
    pub peak_bytes: usize,
    pub reps: usize,
    pub warmup: usize,
    pub samples_ms: Vec<f64>,
}

pub const CSV_HEADER: &str = "variant,batch,mean_ms,std_ms,peak_bytes,reps,warmup";

impl BenchResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{},{},{}",
            self.variant, self.batch, self.mean_ms, self.std_ms, self.peak_bytes, self.reps, self.warmup
        )
    }
}

pub const MIN_REPS: usize = 10;
pub const MIN_WARMUP: usize = 3;

/// Times `net.logits` on random `[batch, C, H, W]` inputs for each batch
/// size. The architecture is `config` with its rescaler replaced by
/// `variant` and `B` sharing left at the variant's default.
pub fn bench_forward(
    config: &NetConfig,
    variant: RescaleKind,
    batch_sizes: &[usize],
    reps: usize,
    warmup: usize,
    seed: u64,
) -> Result<Vec<BenchResult>> {
    if reps < MIN_REPS || warmup < MIN_WARMUP {
        return contract_err(format!(
            "need at least {MIN_REPS} reps after {MIN_WARMUP} warm-ups, got {reps} after {warmup}"
        ));
    }
    let mut cfg = config.clone();
    cfg.rescale = variant;
    cfg.shared_b = None;
    let net = CodaNet::new(cfg, seed)?;
    let [c, h, w] = net.input_shape();
    let mut out = Vec::with_capacity(batch_sizes.len());
    for &batch in batch_sizes {
        // Same inputs for every variant: the generator depends on the seed and batch only.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ batch as u64);
        let x = Tensor::uniform(&[batch, c, h, w], 1.0, &mut rng).map(|v| v.abs());
        for _ in 0..warmup {
            check_finite(&net.logits(&x)?, variant)?;
        }
        let mut samples = Vec::with_capacity(reps);
        let mut peak = 0usize;
        for _ in 0..reps {
            let base = reset_peak();
            let start = Instant::now();
            let y = net.logits(&x)?;
            samples.push(start.elapsed().as_secs_f64() * 1e3);
            peak = peak.max(peak_bytes().saturating_sub(base));
            drop(y);
        }
        let (mean_ms, std_ms) = mean_std(&samples);
        out.push(BenchResult {
            variant,
            batch,
            mean_ms,
            std_ms,
            peak_bytes: peak,
            reps,
            warmup,
            samples_ms: samples,
        });
    }
    Ok(out)
}

/// Runs [`bench_forward`] for every rescaler.
pub fn bench_all(
    config: &NetConfig,
    batch_sizes: &[usize],
    reps: usize,
    warmup: usize,
    seed: u64,
) -> Result<Vec<BenchResult>> {
    let mut out = Vec::new();
    for kind in RescaleKind::ALL {
        out.extend(bench_forward(config, kind, batch_sizes, reps, warmup, seed)?);
    }
    Ok(out)
}

fn check_finite(y: &Tensor, variant: RescaleKind) -> Result<()> {
    if y.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{variant} forward pass produced non-finite logits")))
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn write_bench_csv(path: &Path, results: &[BenchResult]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{CSV_HEADER}")?;
    for r in results {
        writeln!(f, "{}", r.csv_row())?;
    }
    f.flush()?;
    Ok(())
}
