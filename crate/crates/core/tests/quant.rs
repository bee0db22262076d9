use pixemb_core::quant::*;
use pixemb_core::tensor::Tensor;
use proptest::prelude::*;

fn q2() -> QuantConfig {
    QuantConfig::default()
}

#[test]
fn activation_examples() {
    let q = q2();
    assert_eq!(q.quantize(0.0), 0.0);
    assert_eq!(q.quantize(1.7), 1.0);
    assert_eq!(q.quantize(0.3), 1.0 / 3.0);
    assert_eq!(q.code(0.5), 2, "0.5 * 3 = 1.5 rounds away from zero");
    assert_eq!(q.code(-4.0), 0);
}

#[test]
fn nearest_level_by_exhaustion() {
    let q = q2();
    let levels: Vec<f32> = (0..=3).map(|c| q.dequantize(c)).collect();
    for i in 0..=1000 {
        let x = i as f32 / 1000.0;
        let y = q.quantize(x);
        let best = levels
            .iter()
            .map(|l| (l - x).abs())
            .fold(f32::INFINITY, f32::min);
        assert!((y - x).abs() <= best + 1e-6, "x={x} y={y}");
    }
}

#[test]
fn config_validation() {
    assert!(QuantConfig::new(0, 0.0, 1.0).is_err());
    assert!(QuantConfig::new(9, 0.0, 1.0).is_err());
    assert!(QuantConfig::new(2, 1.0, 1.0).is_err());
    assert!(QuantConfig::with_weight_bits(2, 2, 0.0, 1.0).is_err());
    assert!(QuantConfig::new(8, -1.0, 1.0).is_ok());
}

#[test]
fn weight_examples() {
    let w = Tensor::new(&[1, 2], vec![0.5, -1.5]).unwrap();
    let b = quantize_weight(&w).unwrap();
    assert_eq!(b.scales, vec![1.0]);
    assert_eq!(b.values.data(), &[1.0, -1.0]);

    let w = Tensor::new(&[1, 2], vec![0.25, 0.25]).unwrap();
    assert_eq!(quantize_weight(&w).unwrap().values, w);

    let w = Tensor::new(&[1, 1], vec![0.0]).unwrap();
    let b = quantize_weight(&w).unwrap();
    assert_eq!(b.scales, vec![0.0]);
    assert_eq!(b.values.data(), &[0.0]);
    assert_eq!(b.degenerate_channels, vec![0]);
}

#[test]
fn sign_of_zero_is_positive() {
    let w = Tensor::new(&[1, 3], vec![0.0, 3.0, -3.0]).unwrap();
    let b = quantize_weight(&w).unwrap();
    assert_eq!(b.values.data(), &[2.0, 2.0, -2.0]);
}

#[test]
fn ste_examples() {
    let g = Tensor::from_vec(vec![1.0, 1.0, 1.0]);
    let x = Tensor::from_vec(vec![-2.0, 0.5, 2.0]);
    assert_eq!(ste_backward(&g, &x, Some((0.0, 1.0))).unwrap().data(), &[0.0, 1.0, 0.0]);
    assert_eq!(ste_backward(&g, &x, None).unwrap(), g);
    assert!(ste_backward(&g, &Tensor::from_vec(vec![0.0]), None).is_err());
}

#[test]
fn quantized_code_rejects_out_of_range() {
    assert!(QuantizedCode::new(&[2], vec![0, 4], q2()).is_err());
    let c = QuantizedCode::new(&[2], vec![0, 3], q2()).unwrap();
    assert_eq!(c.zero_level(), 0);
    assert_eq!(c.dequantize().data(), &[0.0, 1.0]);
}

proptest! {
    #[test]
    fn activation_is_idempotent_and_monotone(
        bits in 1u8..=8,
        a in -2.0f32..3.0,
        b in -2.0f32..3.0,
    ) {
        let q = QuantConfig::activations(bits).unwrap();
        prop_assert_eq!(q.quantize(q.quantize(a)), q.quantize(a));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(q.quantize(lo) <= q.quantize(hi));
    }

    #[test]
    fn level_count_bounded(bits in 1u8..=4, xs in proptest::collection::vec(-1.0f32..2.0, 1..200)) {
        let q = QuantConfig::activations(bits).unwrap();
        let mut seen: Vec<u32> = xs.iter().map(|&x| q.quantize(x).to_bits()).collect();
        seen.sort_unstable();
        seen.dedup();
        prop_assert!(seen.len() <= 1usize << bits);
    }

    #[test]
    fn ste_matches_elementwise_indicator(
        pairs in proptest::collection::vec((-3.0f32..3.0, -2.0f32..2.0), 1..64),
    ) {
        let g = Tensor::from_vec(pairs.iter().map(|p| p.0).collect());
        let x = Tensor::from_vec(pairs.iter().map(|p| p.1).collect());
        let out = ste_backward(&g, &x, Some((0.0, 1.0))).unwrap();
        for ((o, gi), xi) in out.data().iter().zip(g.data()).zip(x.data()) {
            let ind = if (0.0..=1.0).contains(xi) { 1.0 } else { 0.0 };
            prop_assert_eq!(*o, gi * ind);
        }
    }

    #[test]
    fn binarized_channel_has_two_magnitudes_and_optimal_scale(
        ws in proptest::collection::vec(-2.0f32..2.0, 1..16),
    ) {
        let w = Tensor::new(&[1, ws.len()], ws.clone()).unwrap();
        let b = quantize_weight(&w).unwrap();
        let alpha = b.scales[0];
        for &v in b.values.data() {
            prop_assert!(v == alpha || v == -alpha);
        }
        // 1-d scan oracle for argmin over alpha of ||w - alpha * sign(w)||^2
        let err = |a: f32| -> f64 {
            ws.iter().map(|&x| {
                let d = (x - a * binary_sign(x)) as f64;
                d * d
            }).sum()
        };
        let best = (0..=4000).map(|i| i as f32 * 0.0005).fold((f64::INFINITY, 0.0f32), |acc, a| {
            let e = err(a);
            if e < acc.0 { (e, a) } else { acc }
        });
        prop_assert!(err(alpha) <= best.0 + 1e-6, "alpha={} scan={}", alpha, best.1);
    }
}
