//! Wall-clock benchmarking. Methods alternate round-robin within every
//! repetition so slow drift (frequency scaling, cache state) spreads evenly
//! over all of them.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bitpack::{pack_activations, packed_conv2d, FusedEmbeddingConv, PackedWeights};
use crate::data::synthetic;
use crate::embed::{embed_infer, merge_table, EmbeddingTable, MergedTable, TableInit};
use crate::error::{Error, Result};
use crate::image::{ImageBatch, COMPONENTS};
use crate::linalg::conv2d;
use crate::quant::QuantConfig;
use crate::tensor::Tensor;

pub const DEFAULT_REPEATS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub method: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub runs: usize,
    pub samples_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    pub threads: usize,
    pub machine: String,
}

impl BenchReport {
    pub const HEADER: &'static str = "method,mean_ms,std_ms,runs";

    pub fn record(&self, method: &str) -> Option<&BenchRecord> {
        self.records.iter().find(|r| r.method == method)
    }

    /// `mean(baseline) / mean(method)`.
    pub fn speedup(&self, method: &str, baseline: &str) -> Option<f64> {
        Some(self.record(baseline)?.mean_ms / self.record(method)?.mean_ms)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{},{:.6},{:.6},{}", r.method, r.mean_ms, r.std_ms, r.runs);
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("threads={} machine={}\n", self.threads, self.machine);
        for r in &self.records {
            let _ = writeln!(out, "{:<24} {:>10.4} ms ± {:.4} ms ({} runs)", r.method, r.mean_ms, r.std_ms, r.runs);
        }
        out
    }
}

/// Mean and sample standard deviation; a single sample has deviation 0.
pub fn mean_std(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// A named operation to time.
pub struct Method<'a> {
    pub name: String,
    pub run: Box<dyn FnMut() -> Result<()> + 'a>,
}

impl<'a> Method<'a> {
    pub fn new(name: impl Into<String>, run: impl FnMut() -> Result<()> + 'a) -> Self {
        Self {
            name: name.into(),
            run: Box::new(run),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub repeats: usize,
    /// Untimed calls per method before the first repetition.
    pub warmup: usize,
    /// Consecutive calls per timed run; a run reports time per call.
    pub inner: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            repeats: DEFAULT_REPEATS,
            warmup: 3,
            inner: 1,
        }
    }
}

pub fn machine_description() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{model} ({cores} logical cpus, {})", std::env::consts::OS)
}

/// Times every method `schedule.repeats` times, alternating between them.
pub fn round_robin(mut methods: Vec<Method<'_>>, schedule: Schedule) -> Result<BenchReport> {
    if schedule.repeats == 0 || schedule.inner == 0 {
        return Err(Error::InvalidConfig("repeats and inner iterations must be positive".into()));
    }
    for m in &mut methods {
        for _ in 0..schedule.warmup {
            (m.run)()?;
        }
    }
    let mut samples = vec![Vec::with_capacity(schedule.repeats); methods.len()];
    for _ in 0..schedule.repeats {
        for (m, s) in methods.iter_mut().zip(&mut samples) {
            let start = Instant::now();
            for _ in 0..schedule.inner {
                (m.run)()?;
            }
            s.push(start.elapsed().as_secs_f64() * 1e3 / schedule.inner as f64);
        }
    }
    let records = methods
        .iter()
        .zip(samples)
        .map(|(m, s)| {
            let (mean_ms, std_ms) = mean_std(&s);
            BenchRecord {
                method: m.name.clone(),
                mean_ms,
                std_ms,
                runs: s.len(),
                samples_ms: s,
            }
        })
        .collect();
    Ok(BenchReport {
        records,
        threads: rayon::current_num_threads(),
        machine: machine_description(),
    })
}

pub const PIXEMB_METHOD: &str = "pixemb-packed";
pub const FLOAT_METHOD: &str = "fp-float";

/// First-layer-only comparison: pixel embedding plus a binary 3x3 conv over
/// `3d` code channels against a float 3x3 conv over RGB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstLayerBench {
    pub d: usize,
    pub bits: u8,
    pub out_channels: usize,
    pub size: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for FirstLayerBench {
    fn default() -> Self {
        Self {
            d: 8,
            bits: 2,
            out_channels: 64,
            size: 32,
            schedule: Schedule {
                repeats: DEFAULT_REPEATS,
                warmup: 20,
                inner: 50,
            },
            seed: 0,
        }
    }
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| StandardNormal.sample(rng)).collect())
}

/// Embedding plus binary conv from raw pixels to integer accumulators. Uses
/// the fused lookup kernel when it applies, otherwise the popcount path.
pub enum PixembFirstLayer {
    Fused(FusedEmbeddingConv),
    Popcount(MergedTable, PackedWeights),
}

impl PixembFirstLayer {
    pub fn new(merged: MergedTable, weights: PackedWeights) -> Self {
        match FusedEmbeddingConv::new(&merged, &weights) {
            Ok(f) => PixembFirstLayer::Fused(f),
            Err(_) => PixembFirstLayer::Popcount(merged, weights),
        }
    }

    pub fn forward(&self, images: &ImageBatch) -> Result<crate::bitpack::ConvAccumulators> {
        match self {
            PixembFirstLayer::Fused(f) => f.forward(images, 1, 1),
            PixembFirstLayer::Popcount(m, w) => packed_conv2d(&pack_activations(&embed_infer(images, m))?, w, 1, 1),
        }
    }
}

/// Runs the first-layer microbenchmark on a seeded natural-looking image.
pub fn first_layer_microbench(cfg: &FirstLayerBench) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let quant = QuantConfig::activations(cfg.bits)?;
    let merged = merge_table(&EmbeddingTable::init(cfg.d, quant, TableInit::SortedUniform, &mut rng)?);
    let binary = PackedWeights::from_float(&normal_tensor(&[cfg.out_channels, COMPONENTS * cfg.d, 3, 3], &mut rng)?)?;
    let float_w = normal_tensor(&[cfg.out_channels, COMPONENTS, 3, 3], &mut rng)?;
    let images = synthetic(1, 10, cfg.size, cfg.size, cfg.seed)?.images().clone();
    // Rescaling to [0, 1] is preprocessing for the float path and stays untimed.
    let unit = images.to_unit_tensor();
    let pixemb = PixembFirstLayer::new(merged, binary);
    let methods = vec![
        Method::new(PIXEMB_METHOD, || {
            black_box(pixemb.forward(black_box(&images))?);
            Ok(())
        }),
        Method::new(FLOAT_METHOD, || {
            black_box(conv2d(black_box(&unit), &float_w, 1, 1)?);
            Ok(())
        }),
    ];
    round_robin(methods, cfg.schedule)
}
