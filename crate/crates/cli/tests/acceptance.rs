//! Acceptance suite: one PASS/FAIL line per criterion, then a single verdict.
//!
//! Criteria 5, 6 and 8 train on the CIFAR-10 desk subset located by
//! `PIXEMB_CIFAR10_DIR`; without it they fail with a dataset-missing line.

use std::fs;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use pixemb_core::bench::{first_layer_microbench, FirstLayerBench, DEFAULT_REPEATS, FLOAT_METHOD, PIXEMB_METHOD};
use pixemb_core::data::{self, Dataset};
use pixemb_core::embed::{embed_forward, embed_infer, merge_table, EmbeddingTable, MergedTable};
use pixemb_core::network::{ForwardMode, ModelGraph, ModelSpec, Preset};
use pixemb_core::trainer::{evaluate, late_volatility, train, MetricLog, TrainConfig};
use pixemb_core::{gradcheck, pack_activations, packed_conv2d, ImageBatch, PackedWeights, QuantConfig, QuantizedCode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Passes over the 5000-image desk training split per run.
const DESK_EPOCHS: usize = 10;
const DESK_SEEDS: [u64; 3] = [0, 1, 2];
const DESK_D: usize = 8;

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: usize, name: &'static str, outcome: Result<String, String>, elapsed: Duration) -> Verdict {
    let (pass, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let v = Verdict {
        id,
        name,
        pass,
        detail: format!("{detail} [{:.1}s]", elapsed.as_secs_f64()),
    };
    println!("criterion {} {}: {} {}", v.id, v.name, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    v
}

fn timed(f: impl FnOnce() -> Result<String, String>) -> (Result<String, String>, Duration) {
    let start = Instant::now();
    let r = f();
    (r, start.elapsed())
}

/// Every component takes every value 0..=255 somewhere in a 16x16 image.
fn all_pixel_values() -> ImageBatch {
    let mut px = Vec::with_capacity(256 * 3);
    for p in 0..256usize {
        px.extend_from_slice(&[p as u8, (255 - p) as u8, ((p * 7 + 3) % 256) as u8]);
    }
    ImageBatch::new(1, 16, 16, px).unwrap()
}

/// Table values that stress the rounding: plain uniform draws, values
/// outside the clip range and exact half-step boundaries.
fn stress_table(d: usize, quant: QuantConfig, rng: &mut ChaCha8Rng) -> EmbeddingTable {
    let (lo, hi) = (quant.lo(), quant.hi());
    let levels = quant.max_code() as f32;
    let mut w = EmbeddingTable::random(d, quant, rng).unwrap().into_weights();
    for x in w.data_mut() {
        match rng.gen_range(0..4) {
            0 => *x = rng.gen_range(lo - 1.0..hi + 1.0),
            1 => *x = lo + (rng.gen_range(0..quant.max_code()) as f32 + 0.5) / levels * (hi - lo),
            _ => {}
        }
    }
    EmbeddingTable::from_weights(w, quant).unwrap()
}

fn merge_exactness() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let images = all_pixel_values();
    let grid: Vec<(usize, u8)> = [1, 4, 8, 16].iter().flat_map(|&d| [1u8, 2, 3].map(|q| (d, q))).collect();
    for t in 0..100 {
        let (d, q) = grid[t % grid.len()];
        let quant = QuantConfig::activations(q).unwrap();
        let table = stress_table(d, quant, &mut rng);
        let float = embed_forward(&images, &table).map_err(|e| e.to_string())?;
        let merged = embed_infer(&images, &merge_table(&table)).dequantize();
        if float.shape() != merged.shape() {
            return Err(format!("table {t}: shapes {:?} vs {:?}", float.shape(), merged.shape()));
        }
        if let Some(i) = float.data().iter().zip(merged.data()).position(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!(
                "table {t} (d={d}, Q={q}) element {i}: {} vs {}",
                float.data()[i],
                merged.data()[i]
            ));
        }
    }
    Ok("100 tables over d in {1,4,8,16}, Q in {1,2,3}, all 256 pixel values bit-exact".into())
}

fn payload_size() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for d in [1usize, 2, 3, 4, 8, 16] {
        for q in [1u8, 2, 3] {
            let quant = QuantConfig::activations(q).unwrap();
            let merged = merge_table(&EmbeddingTable::random(d, quant, &mut rng).unwrap());
            let want = (256 * d * q as usize).div_ceil(8);
            let got = merged.to_payload().len();
            if got != want || MergedTable::payload_len(d, q) != want {
                return Err(format!("d={d} Q={q}: payload {got} bytes, expected {want}"));
            }
            let back = MergedTable::from_payload(d, quant, &merged.to_payload()).map_err(|e| e.to_string())?;
            if back != merged {
                return Err(format!("d={d} Q={q}: payload does not round-trip"));
            }
        }
    }
    let len = MergedTable::payload_len(8, 2);
    if len != 512 {
        return Err(format!("d=8 Q=2 gives {len} bytes"));
    }
    Ok("ceil(256dQ/8) on the grid, 512 bytes at d=8 Q=2".into())
}

/// Direct integer convolution: codes times +-1, zero padding.
#[allow(clippy::too_many_arguments)]
fn naive_conv(
    codes: &[u8],
    [n, c, h, w]: [usize; 4],
    signs: &[bool],
    [o, kh, kw]: [usize; 3],
    stride: usize,
    pad: usize,
) -> Vec<i32> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0i32; n * o * oh * ow];
    for i in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0i32;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let (sy, sx) = ((y * stride + ky) as isize - pad as isize, (x * stride + kx) as isize - pad as isize);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let a = codes[((i * c + ic) * h + sy as usize) * w + sx as usize] as i32;
                                let s = signs[((oc * c + ic) * kh + ky) * kw + kx];
                                acc += if s { a } else { -a };
                            }
                        }
                    }
                    out[((i * o + oc) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    out
}

fn packed_conv_exactness() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    const CHANNELS: [usize; 5] = [1, 63, 64, 65, 128];
    for t in 0..500 {
        let c = CHANNELS[t % CHANNELS.len()];
        let q = rng.gen_range(1..=3u8);
        let n = rng.gen_range(1..=2);
        let (h, w) = (rng.gen_range(3..=7), rng.gen_range(3..=7));
        let o = rng.gen_range(1..=9);
        let k = if rng.gen_bool(0.5) { 3 } else { 1 };
        let stride = rng.gen_range(1..=2);
        let pad = if k == 3 { rng.gen_range(0..=1) } else { 0 };
        let quant = QuantConfig::activations(q).unwrap();
        let codes: Vec<u8> = (0..n * c * h * w).map(|_| rng.gen_range(0..=quant.max_code())).collect();
        let signs: Vec<bool> = (0..o * c * k * k).map(|_| rng.gen()).collect();
        let x = QuantizedCode::new(&[n, c, h, w], codes.clone(), quant).map_err(|e| e.to_string())?;
        let weights = PackedWeights::from_signs([o, c, k, k], &signs, vec![1.0; o]).map_err(|e| e.to_string())?;
        let packed = pack_activations(&x).map_err(|e| e.to_string())?;
        let got = packed_conv2d(&packed, &weights, stride, pad).map_err(|e| e.to_string())?.to_nchw();
        let want = naive_conv(&codes, [n, c, h, w], &signs, [o, k, k], stride, pad);
        if got != want {
            return Err(format!("instance {t}: c={c} Q={q} k={k} stride={stride} pad={pad} mismatch"));
        }
    }
    Ok("500 instances over channels {1,63,64,65,128} match the naive integer conv".into())
}

fn gradient_checks() -> Result<String, String> {
    let failures = gradcheck::run_all(3);
    if let Some((name, seed, err)) = failures.first() {
        return Err(format!("{} failures, first {name} seed {seed}: {err}", failures.len()));
    }
    Ok(format!(
        "{} cases incl. embed-train, step {}, rtol {}, atol {}, inputs <= {}",
        gradcheck::CASES.len(),
        gradcheck::STEP,
        gradcheck::RTOL,
        gradcheck::ATOL,
        gradcheck::MAX_INPUT_LEN
    ))
}

fn microbench() -> Result<String, String> {
    let report = first_layer_microbench(&FirstLayerBench::default()).map_err(|e| e.to_string())?;
    let (p, f) = match (report.record(PIXEMB_METHOD), report.record(FLOAT_METHOD)) {
        (Some(p), Some(f)) => (p, f),
        _ => return Err("missing method record".into()),
    };
    if p.runs != DEFAULT_REPEATS || f.runs != DEFAULT_REPEATS || p.samples_ms.len() != 20 || f.samples_ms.len() != 20 {
        return Err(format!("expected 20 runs, got {} and {}", p.runs, f.runs));
    }
    let speedup = f.mean_ms / p.mean_ms;
    let line = format!(
        "3d=24 packed {:.4}+-{:.4} ms vs 3-channel float {:.4}+-{:.4} ms over 20 runs, speedup {speedup:.2}x",
        p.mean_ms, p.std_ms, f.mean_ms, f.std_ms
    );
    if speedup > 1.0 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn determinism() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_pixemb")).args(args).output().map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(String::from_utf8_lossy(&out.stderr).into_owned())
        }
    };
    let a_str = a.to_str().unwrap();
    run(&["train", "--preset", "pixemb-first", "--data", "synthetic:200", "--steps", "12", "--seed", "11", "--out", a_str])?;
    let manifest = a.join("manifest.json");
    run(&["train", "--config", manifest.to_str().unwrap(), "--out", b.to_str().unwrap()])?;
    for f in ["metrics.csv", "checkpoint.pxeb"] {
        let (x, y) = (fs::read(a.join(f)).map_err(|e| e.to_string())?, fs::read(b.join(f)).map_err(|e| e.to_string())?);
        if x != y {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok("metrics.csv and checkpoint.pxeb byte-identical across two runs of one manifest".into())
}

fn cifar_dir() -> Option<PathBuf> {
    let dir = PathBuf::from(std::env::var_os("PIXEMB_CIFAR10_DIR")?);
    dir.join(data::CIFAR10_TEST_FILE).is_file().then_some(dir)
}

struct DeskRun {
    preset: Preset,
    seed: u64,
    top1: f64,
    volatility: f64,
    model: ModelGraph,
}

fn desk_run(preset: Preset, seed: u64, train_set: &Dataset, test_set: &Dataset) -> Result<DeskRun, String> {
    let spec = ModelSpec::new(preset, DESK_D, train_set.num_classes());
    let model = spec.build(&mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| e.to_string())?;
    let steps = TrainConfig::steps_for_epochs(DESK_EPOCHS, train_set.len(), 64);
    let cfg = TrainConfig::desk(steps, seed);
    let start = Instant::now();
    let (model, log): (ModelGraph, MetricLog) = train(model, train_set, Some(test_set), &cfg).map_err(|e| e.to_string())?;
    let series = log.top1_series();
    let top1 = *series.last().ok_or("no evaluations logged")?;
    let volatility = late_volatility(&series).ok_or("too few evaluations for volatility")?;
    println!(
        "  desk {} seed {seed}: top1 {:.2}% volatility {:.3} ({steps} steps, {:.0}s)",
        preset.name(),
        100.0 * top1,
        100.0 * volatility,
        start.elapsed().as_secs_f64()
    );
    Ok(DeskRun {
        preset,
        seed,
        top1,
        volatility,
        model,
    })
}

fn mean(runs: &[DeskRun], preset: Preset, f: impl Fn(&DeskRun) -> f64) -> f64 {
    let v: Vec<f64> = runs.iter().filter(|r| r.preset == preset).map(f).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn accuracy_ordering(runs: &[DeskRun]) -> Result<String, String> {
    let fp = 100.0 * mean(runs, Preset::FpFirst, |r| r.top1);
    let px = 100.0 * mean(runs, Preset::PixembFirst, |r| r.top1);
    let iwq = 100.0 * mean(runs, Preset::IwqFirst, |r| r.top1);
    let line = format!("mean top-1 fp {fp:.2} pixemb {px:.2} iwq {iwq:.2} (pixemb-iwq {:.2}, fp-pixemb {:.2})", px - iwq, fp - px);
    if fp >= px && px >= iwq && px - iwq >= 1.0 && fp - px <= 3.0 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn stability(runs: &[DeskRun]) -> Result<String, String> {
    let px = 100.0 * mean(runs, Preset::PixembFirst, |r| r.volatility);
    let iwq = 100.0 * mean(runs, Preset::IwqFirst, |r| r.volatility);
    let line = format!("late top-1 step std pixemb {px:.3} vs iwq {iwq:.3} pt");
    if px <= iwq {
        Ok(line)
    } else {
        Err(line)
    }
}

fn packed_agreement(runs: &[DeskRun], test_set: &Dataset) -> Result<String, String> {
    let run = runs
        .iter()
        .find(|r| r.preset == Preset::PixembFirst && r.seed == DESK_SEEDS[0])
        .ok_or("no pixemb-first run")?;
    let float = evaluate(&run.model, test_set, ForwardMode::InferFloat).map_err(|e| e.to_string())?;
    let packed = evaluate(&run.model, test_set, ForwardMode::InferPacked).map_err(|e| e.to_string())?;
    let gap = 100.0 * (float.top1 - packed.top1).abs();
    let line = format!("float {:.2}% packed {:.2}% gap {gap:.2} pt", 100.0 * float.top1, 100.0 * packed.top1);
    if gap <= 0.5 {
        Ok(line)
    } else {
        Err(line)
    }
}

#[test]
fn acceptance() {
    let mut verdicts = Vec::new();

    let (r, t) = timed(merge_exactness);
    let r = r.and_then(|d| if t.as_secs_f64() < 10.0 { Ok(d) } else { Err(format!("{d}; exceeded 10 s")) });
    verdicts.push(verdict(1, "merge-exactness", r, t));

    let (r, t) = timed(payload_size);
    verdicts.push(verdict(2, "payload-size", r, t));

    let (r, t) = timed(packed_conv_exactness);
    let r = r.and_then(|d| if t.as_secs_f64() < 60.0 { Ok(d) } else { Err(format!("{d}; exceeded 60 s")) });
    verdicts.push(verdict(3, "packed-conv-exactness", r, t));

    let (r, t) = timed(gradient_checks);
    verdicts.push(verdict(4, "gradient-checks", r, t));

    match cifar_dir() {
        Some(dir) => {
            let start = Instant::now();
            let loaded = data::cifar10_desk(&dir).map_err(|e| e.to_string());
            let mut runs = Vec::new();
            let mut failure = None;
            if let Ok((train_set, test_set)) = &loaded {
                'outer: for preset in [Preset::FpFirst, Preset::PixembFirst, Preset::IwqFirst] {
                    for seed in DESK_SEEDS {
                        match desk_run(preset, seed, train_set, test_set) {
                            Ok(run) => runs.push(run),
                            Err(e) => {
                                failure = Some(format!("{} seed {seed}: {e}", preset.name()));
                                break 'outer;
                            }
                        }
                    }
                }
            }
            let train_time = start.elapsed();
            let problem = match (&loaded, &failure) {
                (Err(e), _) => Some(format!("loading {}: {e}", dir.display())),
                (_, Some(e)) => Some(e.clone()),
                _ => None,
            };
            match problem {
                Some(p) => {
                    for (id, name) in [(5, "desk-accuracy-ordering"), (6, "desk-stability"), (8, "packed-float-agreement")] {
                        verdicts.push(verdict(id, name, Err(p.clone()), train_time));
                    }
                }
                None => {
                    let test_set = &loaded.as_ref().unwrap().1;
                    verdicts.push(verdict(5, "desk-accuracy-ordering", accuracy_ordering(&runs), train_time));
                    verdicts.push(verdict(6, "desk-stability", stability(&runs), Duration::ZERO));
                    let (r, t) = timed(|| packed_agreement(&runs, test_set));
                    verdicts.push(verdict(8, "packed-float-agreement", r, t));
                }
            }
        }
        None => {
            let msg = "dataset missing: set PIXEMB_CIFAR10_DIR to a cifar-10-batches-bin directory".to_string();
            for (id, name) in [(5, "desk-accuracy-ordering"), (6, "desk-stability"), (8, "packed-float-agreement")] {
                verdicts.push(verdict(id, name, Err(msg.clone()), Duration::ZERO));
            }
        }
    }

    let (r, t) = timed(microbench);
    verdicts.push(verdict(7, "first-layer-microbench", r, t));

    let (r, t) = timed(determinism);
    verdicts.push(verdict(9, "train-determinism", r, t));

    verdicts.sort_by_key(|v| v.id);
    println!("summary:");
    for v in &verdicts {
        println!("  criterion {} {}: {}", v.id, v.name, if v.pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<String> = verdicts.iter().filter(|v| !v.pass).map(|v| format!("{} ({})", v.id, v.detail)).collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join("; "));
}
