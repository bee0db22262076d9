use pixemb_core::gradcheck::{self, check_with, run_case, uniform, CASES};
use pixemb_core::tape::OpKind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 5;

fn case(name: &str) {
    for seed in 0..TRIALS {
        if let Err(e) = run_case(name, seed) {
            panic!("{name} seed {seed}: {e}");
        }
    }
}

macro_rules! cases {
    ($($test:ident => $name:literal),* $(,)?) => {
        $(#[test]
        fn $test() {
            case($name);
        })*

        #[test]
        fn every_case_has_a_test() {
            let listed = [$($name),*];
            assert_eq!(listed.len(), CASES.len());
            assert!(CASES.iter().all(|c| listed.contains(c)));
        }
    };
}

cases! {
    matmul => "matmul",
    matmul_transposed => "matmul-transposed",
    conv2d => "conv2d",
    add => "add",
    mul => "mul",
    scale => "scale",
    sum => "sum",
    relu => "relu",
    max_pool => "max-pool",
    mean_pool => "mean-pool",
    batch_norm => "batch-norm",
    batch_norm_running => "batch-norm-running",
    softmax_cross_entropy => "softmax-cross-entropy",
    gather_columns => "gather-columns",
    reshape => "reshape",
    permute => "permute",
    quantize_activation_follows_clipped_surrogate => "quantize-activation",
    quantize_weight_follows_identity_surrogate => "quantize-weight",
    embed_train_composite => "embed-train",
    composite_network_graph => "composite",
}

#[test]
fn every_op_kind_is_covered() {
    let kinds = [
        (OpKind::MatMul, "matmul"),
        (OpKind::Conv2d, "conv2d"),
        (OpKind::Add, "add"),
        (OpKind::Mul, "mul"),
        (OpKind::Scale, "scale"),
        (OpKind::Relu, "relu"),
        (OpKind::MaxPool, "max-pool"),
        (OpKind::MeanPool, "mean-pool"),
        (OpKind::BatchNorm, "batch-norm"),
        (OpKind::SoftmaxCrossEntropy, "softmax-cross-entropy"),
        (OpKind::GatherColumns, "gather-columns"),
        (OpKind::Reshape, "reshape"),
        (OpKind::Permute, "permute"),
        (OpKind::Sum, "sum"),
        (OpKind::QuantizeActivation, "quantize-activation"),
        (OpKind::QuantizeWeight, "quantize-weight"),
    ];
    for (kind, name) in kinds {
        assert!(CASES.contains(&name), "{kind:?}");
    }
}

#[test]
fn a_wrong_gradient_is_detected() {
    let x = uniform(&[8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    // Tape gradient of 1.0·x against finite differences of 1.02·x.
    let res = check_with(&[x.clone()], &|t, v| Ok(t.scale(v[0], 1.0)), &|t, v| Ok(t.scale(v[0], 1.02)), 0);
    assert!(res.is_err());
    // The weight quantizer's true forward is piecewise constant; only the
    // surrogate comparison passes.
    let w = uniform(&[2, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let q = |t: &mut pixemb_core::Tape, v: &[pixemb_core::Var]| t.quantize_weight(v[0], pixemb_core::quant::WeightScaling::PerTensor);
    assert!(gradcheck::check(&[w], &q, 0).is_err());
}

#[test]
fn oversized_inputs_are_refused() {
    let x = uniform(&[65], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(gradcheck::check(&[x], &|t, v| Ok(t.sum(v[0])), 0).is_err());
}
