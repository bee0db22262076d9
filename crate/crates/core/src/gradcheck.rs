//! Central finite-difference checks of the tape's analytic gradients.
//!
//! Each case draws random inputs of at most 64 elements, weights the op
//! output by a random tensor `R`, and compares the tape gradient of
//! `Σ R ⊙ op(inputs)` with central differences. Quantizers are compared
//! against their straight-through surrogate: the activation quantizer
//! differentiates as `clamp(x, lo, hi)`, the weight quantizer as the identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embed::embed_train;
use crate::error::Result;
use crate::image::ImageBatch;
use crate::quant::{QuantConfig, WeightScaling};
use crate::tape::{BatchNormMode, Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f32 = 1e-3;
pub const RTOL: f64 = 1e-2;
pub const ATOL: f64 = 1e-3;
pub const MAX_INPUT_LEN: usize = 64;

/// Every case name accepted by [`run_case`].
pub const CASES: &[&str] = &[
    "matmul",
    "matmul-transposed",
    "conv2d",
    "add",
    "mul",
    "scale",
    "sum",
    "relu",
    "max-pool",
    "mean-pool",
    "batch-norm",
    "batch-norm-running",
    "softmax-cross-entropy",
    "gather-columns",
    "reshape",
    "permute",
    "quantize-activation",
    "quantize-weight",
    "embed-train",
    "composite",
];

pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

/// Values with `|x| ≥ 0.05`, keeping ReLU kinks outside `±STEP`.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let v: f32 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    data.into_tensor(shape)
}

/// A shuffled grid with spacing 0.05, so max-pool winners never tie.
fn distinct(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    order.iter().map(|&k| k as f32 * 0.05 - 1.0).collect::<Vec<_>>().into_tensor(shape)
}

trait IntoTensor {
    fn into_tensor(self, shape: &[usize]) -> Tensor;
}

impl IntoTensor for Vec<f32> {
    fn into_tensor(self, shape: &[usize]) -> Tensor {
        Tensor::new(shape, self).expect("shape matches data")
    }
}

fn dot(a: &Tensor, r: &Tensor) -> f64 {
    a.data().iter().zip(r.data()).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Compares tape gradients of `Σ R ⊙ analytic(inputs)` with central
/// differences of `Σ R ⊙ surrogate(inputs)` for every input element. The
/// loss is accumulated in f64 outside the tape.
pub fn check_with(inputs: &[Tensor], analytic: &Build<'_>, surrogate: &Build<'_>, seed: u64) -> std::result::Result<(), String> {
    if let Some(x) = inputs.iter().find(|x| x.len() > MAX_INPUT_LEN) {
        return Err(format!("input of {} elements exceeds {MAX_INPUT_LEN}", x.len()));
    }
    let fail = |e: crate::Error| e.to_string();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = analytic(&mut tape, &vars).map_err(fail)?;
    let r = uniform(tape.value(out).shape(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let rv = tape.leaf(r.clone());
    let weighted = tape.mul(out, rv).map_err(fail)?;
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss).map_err(fail)?;

    let eval = |inputs: &[Tensor]| -> std::result::Result<f64, String> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = surrogate(&mut tape, &vars).map_err(fail)?;
        Ok(dot(tape.value(out), &r))
    };
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get(*v);
        if g.shape() != inputs[i].shape() {
            return Err(format!("gradient of input {i} has shape {:?}, value {:?}", g.shape(), inputs[i].shape()));
        }
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * STEP as f64);
            let analytic = g.data()[j] as f64;
            if (analytic - numeric).abs() > ATOL + RTOL * numeric.abs() {
                return Err(format!("d/d input{i}[{j}]: analytic {analytic} vs numeric {numeric}"));
            }
        }
    }
    Ok(())
}

pub fn check(inputs: &[Tensor], build: &Build<'_>, seed: u64) -> std::result::Result<(), String> {
    check_with(inputs, build, build, seed)
}

/// Runs one named case with inputs drawn from `seed`.
pub fn run_case(name: &str, seed: u64) -> std::result::Result<(), String> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    match name {
        "matmul" => {
            let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..5));
            let (a, b) = (uniform(&[m, k], -1.0, 1.0, rng), uniform(&[k, n], -1.0, 1.0, rng));
            check(&[a, b], &|t, v| t.matmul(v[0], v[1]), seed)
        }
        "matmul-transposed" => {
            let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..5));
            let (a, b) = (uniform(&[m, k], -1.0, 1.0, rng), uniform(&[n, k], -1.0, 1.0, rng));
            check(&[a, b], &|t, v| t.matmul_transposed(v[0], v[1]), seed)
        }
        "conv2d" => {
            let (c, o, k) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..=3));
            let (stride, padding) = (rng.gen_range(1..=2), rng.gen_range(0..=1));
            let x = uniform(&[1, c, 4, 4], -1.0, 1.0, rng);
            let w = uniform(&[o, c, k, k], -1.0, 1.0, rng);
            check(&[x, w], &move |t, v| t.conv2d(v[0], v[1], stride, padding), seed)
        }
        "add" | "mul" => {
            let shape = [rng.gen_range(1..5), rng.gen_range(1..5)];
            let (a, b) = (uniform(&shape, -1.0, 1.0, rng), uniform(&shape, -1.0, 1.0, rng));
            if name == "add" {
                check(&[a, b], &|t, v| t.add(v[0], v[1]), seed)
            } else {
                check(&[a.clone(), b], &|t, v| t.mul(v[0], v[1]), seed)?;
                check(&[a], &|t, v| t.mul(v[0], v[0]), seed)
            }
        }
        "scale" => {
            let f = rng.gen_range(-2.0..2.0);
            check(&[uniform(&[3, 4], -1.0, 1.0, rng)], &move |t, v| Ok(t.scale(v[0], f)), seed)
        }
        "sum" => check(&[uniform(&[2, 3, 2], -1.0, 1.0, rng)], &|t, v| Ok(t.sum(v[0])), seed),
        "relu" => check(&[away_from_zero(&[2, 3, 2], rng)], &|t, v| Ok(t.relu(v[0])), seed),
        "max-pool" | "mean-pool" => {
            let x = distinct(&[1, rng.gen_range(1..4), 4, 4], rng);
            let max = name == "max-pool";
            for (k, s) in [(2, 2), (3, 1), (4, 4)] {
                check(&[x.clone()], &move |t, v| if max { t.max_pool(v[0], k, s) } else { t.mean_pool(v[0], k, s) }, seed)?;
            }
            Ok(())
        }
        "batch-norm" => {
            let c = rng.gen_range(1..4);
            let (g, b) = (uniform(&[c], 0.5, 1.5, rng), uniform(&[c], -0.5, 0.5, rng));
            let batch = |t: &mut Tape, v: &[Var]| Ok(t.batch_norm(v[0], v[1], v[2], BatchNormMode::Batch { eps: 1e-5 })?.0);
            check(&[uniform(&[3, c, 2, 2], -1.0, 1.0, rng), g.clone(), b.clone()], &batch, seed)?;
            check(&[uniform(&[4, c], -1.0, 1.0, rng), g, b], &batch, seed)
        }
        "batch-norm-running" => {
            let c = rng.gen_range(1..4);
            let (g, b) = (uniform(&[c], 0.5, 1.5, rng), uniform(&[c], -0.5, 0.5, rng));
            let mean: Vec<f32> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let var: Vec<f32> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
            let running = move |t: &mut Tape, v: &[Var]| {
                let mode = BatchNormMode::Running {
                    mean: &mean,
                    var: &var,
                    eps: 1e-5,
                };
                Ok(t.batch_norm(v[0], v[1], v[2], mode)?.0)
            };
            check(&[uniform(&[3, c, 2, 2], -1.0, 1.0, rng), g, b], &running, seed)
        }
        "softmax-cross-entropy" => {
            let (n, k) = (rng.gen_range(1..5), rng.gen_range(2..7));
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let logits = uniform(&[n, k], -3.0, 3.0, rng);
            check(&[logits], &move |t, v| t.softmax_cross_entropy(v[0], &labels), seed)
        }
        "gather-columns" => {
            let (d, n) = (rng.gen_range(1..4), rng.gen_range(2..8));
            let idx: Vec<usize> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..n)).collect();
            check(&[uniform(&[d, n], -1.0, 1.0, rng)], &move |t, v| t.gather_columns(v[0], &idx), seed)
        }
        "reshape" => check(&[uniform(&[2, 3, 4], -1.0, 1.0, rng)], &|t, v| t.reshape(v[0], &[4, 6]), seed),
        "permute" => check(&[uniform(&[2, 3, 4], -1.0, 1.0, rng)], &|t, v| t.permute(v[0], &[2, 0, 1]), seed),
        "quantize-activation" => {
            let q = QuantConfig::default();
            // Inside the clip range and beyond both ends, away from the edges.
            let x = [uniform(&[12], 0.05, 0.95, rng), uniform(&[6], -1.0, -0.05, rng), uniform(&[6], 1.05, 2.0, rng)]
                .iter()
                .flat_map(|t| t.data().to_vec())
                .collect::<Vec<_>>()
                .into_tensor(&[24]);
            check_with(&[x], &move |t, v| Ok(t.quantize_activation(v[0], &q)), &move |t, v| clamp_surrogate(t, v[0], &q), seed)
        }
        "quantize-weight" => {
            for scaling in [WeightScaling::PerOutputChannel, WeightScaling::PerTensor] {
                for shape in [&[3, 2, 2, 2][..], &[4, 5]] {
                    let w = uniform(shape, -1.0, 1.0, rng);
                    check_with(&[w], &move |t, v| t.quantize_weight(v[0], scaling), &|t, v| Ok(t.scale(v[0], 1.0)), seed)?;
                }
            }
            Ok(())
        }
        "embed-train" => embed_case(rng, seed),
        "composite" => {
            let labels: Vec<usize> = (0..2).map(|_| rng.gen_range(0..3)).collect();
            let inputs = [
                uniform(&[2, 2, 4, 4], -1.0, 1.0, rng),
                uniform(&[3, 2, 3, 3], -0.5, 0.5, rng),
                uniform(&[3], 0.5, 1.5, rng),
                uniform(&[3], -0.5, 0.5, rng),
                uniform(&[3, 3], -1.0, 1.0, rng),
            ];
            let graph = move |t: &mut Tape, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], 1, 1)?;
                let (y, _) = t.batch_norm(y, v[2], v[3], BatchNormMode::Batch { eps: 1e-5 })?;
                let y = t.scale(y, 0.5);
                let y = t.mean_pool(y, 4, 4)?;
                let y = t.reshape(y, &[2, 3])?;
                let logits = t.matmul_transposed(y, v[4])?;
                t.softmax_cross_entropy(logits, &labels)
            };
            check(&inputs, &graph, seed)
        }
        other => Err(format!("unknown gradient-check case {other:?}")),
    }
}

/// `clamp(x, lo, hi)` built from tape ops that are linear at the given point:
/// `x·m + (clamp(x) − x·m)` with `m` the in-range indicator.
fn clamp_surrogate(t: &mut Tape, x: Var, q: &QuantConfig) -> Result<Var> {
    let xv = t.value(x).clone();
    let mask = xv.map(|v| if q.in_clip(v) { 1.0 } else { 0.0 });
    let offset: Vec<f32> = xv.data().iter().zip(mask.data()).map(|(&v, &m)| v.clamp(q.lo(), q.hi()) - m * v).collect();
    let m = t.leaf(mask);
    let o = t.leaf(offset.into_tensor(xv.shape()));
    let masked = t.mul(x, m)?;
    t.add(masked, o)
}

/// The embedding composite on a 2×2 image. Only 64 table entries are free:
/// a `(d, 64/d)` block widened to `(d, 256)` by a fixed selection matrix.
fn embed_case(rng: &mut ChaCha8Rng, seed: u64) -> std::result::Result<(), String> {
    let q = QuantConfig::default();
    let d = rng.gen_range(1..4);
    let cols = MAX_INPUT_LEN / d;
    let pixels: Vec<u8> = (0..12).map(|_| rng.gen_range(0..cols as u8)).collect();
    let images = ImageBatch::new(1, 2, 2, pixels).map_err(|e| e.to_string())?;
    let block = uniform(&[d, cols], 0.05, 0.95, rng);
    let build = |quantized: bool| {
        let images = images.clone();
        move |t: &mut Tape, v: &[Var]| {
            let mut pad = vec![0.0f32; cols * 256];
            for j in 0..cols {
                pad[j * 256 + j] = 1.0;
            }
            let pad = t.leaf(Tensor::new(&[cols, 256], pad)?);
            let table = t.matmul(v[0], pad)?;
            if quantized {
                embed_train(t, &images, table, &q)
            } else {
                let gathered = t.gather_columns(table, &images.nchw_indices())?;
                let split = t.reshape(gathered, &[d, 1, 3, 4])?;
                let moved = t.permute(split, &[1, 2, 0, 3])?;
                t.reshape(moved, &[1, 3 * d, 2, 2])
            }
        }
    };
    check_with(&[block], &build(true), &build(false), seed)
}

/// Runs every case for seeds `0..trials`; returns the failures.
pub fn run_all(trials: u64) -> Vec<(&'static str, u64, String)> {
    let mut failures = Vec::new();
    for &name in CASES {
        for seed in 0..trials {
            if let Err(e) = run_case(name, seed) {
                failures.push((name, seed, e));
            }
        }
    }
    failures
}
