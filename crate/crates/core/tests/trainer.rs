use pixemb_core::data::{self, Dataset};
use pixemb_core::network::{LayerConfig, ModelGraph, ModelSpec, ParamKind, Preset};
use pixemb_core::trainer::{evaluate, late_volatility, train, MetricLog, MetricRecord, TrainConfig};
use pixemb_core::{Error, ForwardMode, ImageBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model(preset: Preset, data: &Dataset, seed: u64) -> ModelGraph {
    let mut spec = ModelSpec::new(preset, 4, data.num_classes());
    spec.height = data.height();
    spec.width = data.width();
    spec.widths = vec![8, 16];
    spec.blocks_per_stage = 1;
    spec.build(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn toy_config(steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::desk(steps, 0);
    cfg.batch_size = 8;
    cfg.eval_every = 10;
    cfg
}

fn snapshot(model: &ModelGraph, kinds: &[ParamKind]) -> Vec<f32> {
    model
        .params()
        .iter()
        .filter(|(_, p)| kinds.contains(&p.kind))
        .flat_map(|(_, p)| p.value.data().to_vec())
        .collect()
}

#[test]
fn desk_schedule_decays_at_half_and_three_quarters() {
    let cfg = TrainConfig::desk(100, 0);
    assert_eq!(cfg.lr_decay_steps, vec![50, 75]);
    assert_eq!(cfg.lr_at(0), 0.05);
    assert_eq!(cfg.lr_at(49), 0.05);
    assert!((cfg.lr_at(50) - 0.005).abs() < 1e-9);
    assert!((cfg.lr_at(99) - 0.0005).abs() < 1e-9);
    assert!(cfg.validate().is_ok());
}

#[test]
fn invalid_configs_are_rejected() {
    let base = TrainConfig::desk(10, 0);
    let mut c = base.clone();
    c.batch_size = 0;
    assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    let mut c = base.clone();
    c.momentum = 1.0;
    assert!(c.validate().is_err());
    let mut c = base.clone();
    c.lr_decay_steps = vec![5, 3];
    assert!(c.validate().is_err());
    let mut c = base;
    c.base_lr = f32::NAN;
    assert!(c.validate().is_err());
    assert_eq!(TrainConfig::steps_for_epochs(3, 100, 64), 5);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let toy = data::toy_separable(0);
    let model = small_model(Preset::PixembFirst, &toy, 1);
    let learnable = [ParamKind::Weight, ParamKind::Affine, ParamKind::Table];
    let before = snapshot(&model, &learnable);
    let mut cfg = toy_config(5);
    cfg.base_lr = 0.0;
    let (after, _) = train(model, &toy, None, &cfg).unwrap();
    assert_eq!(snapshot(&after, &learnable), before);
}

#[test]
fn one_step_moves_the_embedding_table() {
    let toy = data::toy_separable(0);
    let model = small_model(Preset::PixembFirst, &toy, 1);
    let before = model.embedding_table().unwrap();
    let (after, _) = train(model, &toy, None, &toy_config(1)).unwrap();
    let after = after.embedding_table().unwrap();
    assert_ne!(before.weights(), after.weights());
    let q = after.quant();
    assert!(after.weights().data().iter().all(|&v| (q.lo()..=q.hi()).contains(&v)));
}

#[test]
fn toy_set_is_learned_within_200_steps() {
    let toy = data::toy_separable(0);
    for preset in [Preset::PixembFirst, Preset::IwqFirst, Preset::FpFirst] {
        let model = small_model(preset, &toy, 2);
        let mut cfg = toy_config(200);
        cfg.augment = false;
        let (model, log) = train(model, &toy, Some(&toy), &cfg).unwrap();
        let acc = evaluate(&model, &toy, ForwardMode::InferFloat).unwrap();
        assert_eq!(acc.top1, 1.0, "{preset}: log {:?}", log.top1_series());
    }
}

#[test]
fn training_is_deterministic() {
    let all = data::synthetic(120, 4, 8, 8, 5).unwrap();
    let (tr, val) = all.split(96).unwrap();
    let run = || {
        let model = small_model(Preset::PixembFirst, &tr, 3);
        let mut cfg = TrainConfig::desk(12, 7);
        cfg.batch_size = 16;
        cfg.eval_every = 4;
        let (m, log) = train(model, &tr, Some(&val), &cfg).unwrap();
        (pixemb_core::io::save_train(&m), log.to_csv())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn metrics_are_logged_at_eval_steps_and_the_last_step() {
    let toy = data::toy_separable(0);
    let model = small_model(Preset::IwqFirst, &toy, 4);
    let mut cfg = toy_config(25);
    cfg.eval_every = 10;
    let (_, log) = train(model, &toy, Some(&toy), &cfg).unwrap();
    let steps: Vec<usize> = log.records().iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![10, 20, 25]);
    let csv = log.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(MetricLog::HEADER));
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 5, "{line}");
        assert!(fields[3].parse::<f64>().is_ok());
        assert_eq!(fields[4], "", "top5 is undefined for two classes");
    }
}

#[test]
fn metric_log_rejects_out_of_order_steps() {
    let mut log = MetricLog::default();
    let rec = |step| MetricRecord {
        step,
        loss: 1.0,
        lr: 0.1,
        top1: None,
        top5: None,
    };
    log.push(rec(2)).unwrap();
    assert!(log.push(rec(2)).is_err());
    assert!(log.push(rec(1)).is_err());
    log.push(rec(3)).unwrap();
    assert_eq!(log.records().len(), 2);
}

#[test]
fn constant_model_scores_one_over_k_on_balanced_data() {
    let k = 4;
    let per = 5;
    let labels: Vec<usize> = (0..k * per).map(|i| i % k).collect();
    let images = ImageBatch::new(k * per, 4, 4, vec![100; k * per * 48]).unwrap();
    let set = Dataset::new(images, labels, k).unwrap();
    let mut model = small_model(Preset::IwqFirst, &set, 0);
    let fc = model.layers().iter().position(|l| matches!(l, LayerConfig::Fc { .. })).unwrap();
    for p in model.params_mut().layer_mut(fc) {
        p.value = p.value.map(|_| 0.0);
    }
    for mode in [ForwardMode::InferFloat, ForwardMode::InferPacked] {
        let acc = evaluate(&model, &set, mode).unwrap();
        assert!((acc.top1 - 1.0 / k as f64).abs() < 1e-12, "{mode:?}: {}", acc.top1);
    }
}

#[test]
fn late_volatility_matches_hand_computation() {
    // Final third of 9 evals: [0.5, 0.7, 0.6] -> diffs [0.2, -0.1].
    let series = [0.1, 0.2, 0.3, 0.4, 0.4, 0.4, 0.5, 0.7, 0.6];
    let v = late_volatility(&series).unwrap();
    assert!((v - 0.15).abs() < 1e-12, "{v}");
    assert_eq!(late_volatility(&[0.5]), None);
    assert_eq!(late_volatility(&[0.1, 0.1, 0.1, 0.1, 0.1, 0.1]), Some(0.0));
}
