//! SGD training with a step-decay schedule, batch-norm running statistics
//! and metric logging.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment_batch, shuffled_indices, Dataset};
use crate::embed::clamp_table;
use crate::error::{Error, Result};
use crate::network::{ForwardMode, LayerConfig, ModelGraph, ParamKind};
use crate::tape::Tape;

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub total_steps: usize,
    pub lr_decay_steps: Vec<usize>,
    pub lr_decay_factor: f32,
    pub seed: u64,
    /// Steps between validation evaluations; the last step is always evaluated.
    pub eval_every: usize,
    pub augment: bool,
}

impl TrainConfig {
    /// Desk-scale recipe: decays by 10x at half and three quarters of
    /// `total_steps`.
    pub fn desk(total_steps: usize, seed: u64) -> Self {
        let total_steps = total_steps.max(1);
        let mut decays: Vec<usize> = [total_steps / 2, total_steps * 3 / 4]
            .into_iter()
            .filter(|&s| s > 0)
            .collect();
        decays.dedup();
        Self {
            batch_size: 64,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            total_steps,
            lr_decay_steps: decays,
            lr_decay_factor: 0.1,
            seed,
            eval_every: (total_steps / 30).max(1),
            augment: true,
        }
    }

    /// Steps for `epochs` passes over `n` images.
    pub fn steps_for_epochs(epochs: usize, n: usize, batch_size: usize) -> usize {
        (epochs * n).div_ceil(batch_size.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.batch_size == 0 || self.total_steps == 0 || self.eval_every == 0 {
            return bad("batch_size, total_steps and eval_every must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be finite and non-negative", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay must be non-negative".into());
        }
        if self.lr_decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_decay_steps must be strictly increasing".into());
        }
        if self.lr_decay_steps.last().is_some_and(|&s| s >= self.total_steps) {
            return bad("lr_decay_steps must lie below total_steps".into());
        }
        Ok(())
    }

    /// `base_lr * factor^(boundaries passed)`; boundary `b` applies from step `b` on.
    pub fn lr_at(&self, step: usize) -> f32 {
        let passed = self.lr_decay_steps.iter().filter(|&&b| step >= b).count();
        self.base_lr * self.lr_decay_factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub loss: f32,
    pub lr: f32,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricLog {
    records: Vec<MetricRecord>,
}

impl MetricLog {
    pub const HEADER: &'static str = "step,loss,lr,top1,top5";

    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        if self.records.last().is_some_and(|r| r.step >= record.step) {
            return Err(Error::Contract(format!("metric record for step {} out of order", record.step)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn top1_series(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.top1).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(out, "{},{:.6},{:.6e},{},{}", r.step, r.loss, r.lr, opt(r.top1), opt(r.top5));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub top1: f64,
    /// Only defined with at least five classes.
    pub top5: Option<f64>,
}

const EVAL_BATCH: usize = 250;

/// Single-crop accuracy of `model` on `data` along `mode`.
pub fn evaluate(model: &ModelGraph, data: &Dataset, mode: ForwardMode) -> Result<Accuracy> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let mode = if mode == ForwardMode::Train {
        ForwardMode::InferFloat
    } else {
        mode
    };
    let packed = match mode {
        ForwardMode::InferPacked => Some(model.compile()?),
        _ => None,
    };
    let k = data.num_classes();
    let (mut top1, mut top5) = (0usize, 0usize);
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(data.len())).collect();
        let images = data.images().select(&idx);
        let logits = match &packed {
            Some(p) => p.forward(&images)?,
            None => model.forward(&images, mode)?,
        };
        for (ranking, &i) in logits.ranking().iter().zip(&idx) {
            let label = data.labels()[i];
            top1 += usize::from(ranking[0] == label);
            top5 += usize::from(ranking.iter().take(5).any(|&c| c == label));
        }
    }
    let n = data.len() as f64;
    Ok(Accuracy {
        top1: top1 as f64 / n,
        top5: (k >= 5).then_some(top5 as f64 / n),
    })
}

/// Trains `model` on `train` and evaluates on `val` (infer-float) every
/// `eval_every` steps. Fully determined by `cfg.seed` and the initial model.
pub fn train(mut model: ModelGraph, train: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<(ModelGraph, MetricLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if (train.height(), train.width()) != model.input_size() {
        return Err(Error::shape(
            "train-input",
            &[train.height(), train.width()],
            &[model.input_size().0, model.input_size().1],
        ));
    }
    if train.num_classes() > model.num_classes() {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes, model predicts {}",
            train.num_classes(),
            model.num_classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Vec<Vec<f32>>> = (0..model.params().num_layers())
        .map(|id| model.params().layer(id).iter().map(|p| vec![0.0; p.value.len()]).collect())
        .collect();
    let mut log = MetricLog::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let (mut loss_sum, mut loss_count) = (0.0f64, 0usize);
    for step in 0..cfg.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(train.len()) {
            if cursor == order.len() {
                order = shuffled_indices(train.len(), &mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut images = train.images().select(&batch);
        if cfg.augment {
            images = augment_batch(&images, &mut rng);
        }
        let labels: Vec<usize> = batch.iter().map(|&i| train.labels()[i]).collect();

        let mut tape = Tape::new();
        let fwd = model.forward_tape(&mut tape, &images, true)?;
        let loss_var = tape.softmax_cross_entropy(fwd.logits, &labels)?;
        let loss = tape.value(loss_var).item().expect("scalar loss");
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let grads = tape.backward(loss_var)?;
        let lr = cfg.lr_at(step);

        for (id, at, stats) in &fwd.batch_stats {
            let unbias = if stats.count > 1 {
                stats.count as f32 / (stats.count - 1) as f32
            } else {
                1.0
            };
            let ps = model.params_mut().layer_mut(*id);
            for (m, &b) in ps[at + 2].value.data_mut().iter_mut().zip(&stats.mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
            }
            for (v, &b) in ps[at + 3].value.data_mut().iter_mut().zip(&stats.var) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b * unbias;
            }
        }

        for id in 0..model.params().num_layers() {
            let layer = model.layers()[id];
            let ps = model.params_mut().layer_mut(id);
            for (j, p) in ps.iter_mut().enumerate() {
                let Some(var) = fwd.param_vars[id][j] else { continue };
                let g = grads.get(var);
                let decay = if p.kind == ParamKind::Weight { cfg.weight_decay } else { 0.0 };
                let vel = &mut velocity[id][j];
                for ((w, v), &g) in p.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(g.data()) {
                    *v = cfg.momentum * *v + g + decay * *w;
                    *w -= lr * *v;
                }
                if p.kind == ParamKind::Table {
                    if let LayerConfig::PixelEmbed { quant, .. } = layer {
                        clamp_table(&mut p.value, &quant);
                    }
                }
            }
        }

        loss_sum += loss as f64;
        loss_count += 1;
        let last = step + 1 == cfg.total_steps;
        if (step + 1) % cfg.eval_every == 0 || last {
            let acc = match val {
                Some(v) => Some(evaluate(&model, v, ForwardMode::InferFloat)?),
                None => None,
            };
            log.push(MetricRecord {
                step: step + 1,
                loss: (loss_sum / loss_count as f64) as f32,
                lr,
                top1: acc.map(|a| a.top1),
                top5: acc.and_then(|a| a.top5),
            })?;
            log::debug!("step {} loss {:.4} lr {lr:.2e} top1 {:?}", step + 1, loss_sum / loss_count as f64, acc.map(|a| a.top1));
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    Ok((model, log))
}

/// Standard deviation of consecutive differences over the final third of a
/// series of evaluations; a proxy for how smoothly training converges.
pub fn late_volatility(top1: &[f64]) -> Option<f64> {
    let tail = &top1[top1.len() - top1.len().div_ceil(3)..];
    let diffs: Vec<f64> = tail.windows(2).map(|w| w[1] - w[0]).collect();
    if diffs.is_empty() {
        return None;
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    Some((diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt())
}
