use pixemb_core::bitpack::*;
use pixemb_core::embed::{embed_infer, merge_table, EmbeddingTable};
use pixemb_core::image::ImageBatch;
use pixemb_core::quant::{QuantConfig, QuantizedCode};
use pixemb_core::tensor::Tensor;
use pixemb_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;

fn q(bits: u8) -> QuantConfig {
    QuantConfig::activations(bits).unwrap()
}

#[test]
fn zero_codes_pack_to_zero_words() {
    let codes = QuantizedCode::new(&[1, 3, 2, 2], vec![0; 12], q(2)).unwrap();
    let p = pack_activations(&codes).unwrap();
    assert!(p.storage().iter().all(|&w| w == 0));
}

#[test]
fn code_three_sets_both_planes() {
    let codes = QuantizedCode::new(&[1, 1, 1, 1], vec![3], q(2)).unwrap();
    let p = pack_activations(&codes).unwrap();
    assert_eq!(p.storage(), &[1, 1]);
}

#[test]
fn rejects_out_of_range_codes() {
    let codes = QuantizedCode::new_unchecked(vec![1, 1, 1, 1], vec![4], q(2));
    assert!(matches!(pack_activations(&codes), Err(Error::InvalidInput(_))));
}

#[test]
fn single_tap_example() {
    let codes = QuantizedCode::new(&[1, 1, 1, 1], vec![3], q(2)).unwrap();
    let x = pack_activations(&codes).unwrap();
    let w = PackedWeights::from_signs([1, 1, 1, 1], &[true], vec![1.0]).unwrap();
    let acc = packed_conv2d(&x, &w, 1, 0).unwrap();
    assert_eq!(acc.values(), &[3]);
    assert_eq!(acc.dequantize(&q(2), &w).data(), &[1.0]);
}

#[test]
fn negated_weights_negate_output() {
    let codes = QuantizedCode::new(&[1, 70, 3, 3], (0..630).map(|i| (i % 4) as u8).collect(), q(2)).unwrap();
    let x = pack_activations(&codes).unwrap();
    let n = 70 * 9;
    let plus = PackedWeights::from_signs([1, 70, 3, 3], &vec![true; n], vec![0.5]).unwrap();
    let minus = PackedWeights::from_signs([1, 70, 3, 3], &vec![false; n], vec![0.5]).unwrap();
    let a = packed_conv2d(&x, &plus, 1, 1).unwrap();
    let b = packed_conv2d(&x, &minus, 1, 1).unwrap();
    assert!(a.values().iter().any(|&v| v != 0));
    assert_eq!(a.values(), b.values().iter().map(|v| -v).collect::<Vec<_>>());
}

#[test]
fn weights_unpack_to_scaled_signs() {
    let w = Tensor::new(&[2, 1, 1, 2], vec![0.5, -1.5, 0.0, 2.0]).unwrap();
    let p = PackedWeights::from_float(&w).unwrap();
    assert_eq!(p.unpack().data(), &[1.0, -1.0, 1.0, 1.0]);
    assert_eq!(p.sign_sums(), &[0, 2]);
    let again = PackedWeights::from_parts(p.shape(), p.positive_words(), p.scales().to_vec()).unwrap();
    assert_eq!(again, p);
}

#[test]
fn shape_mismatch_is_rejected() {
    let codes = QuantizedCode::new(&[1, 2, 1, 1], vec![0, 1], q(2)).unwrap();
    let x = pack_activations(&codes).unwrap();
    let w = PackedWeights::from_signs([1, 3, 1, 1], &[true; 3], vec![1.0]).unwrap();
    assert!(packed_conv2d(&x, &w, 1, 0).is_err());
}

fn lcg(seed: &mut u64) -> u64 {
    *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    *seed >> 33
}

#[test]
fn fused_kernel_matches_popcount_path() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let mut seed = 11u64;
    let cases = [
        (1usize, 1u8, 1usize, 3usize, 1usize, 1usize),
        (4, 2, 70, 3, 1, 1),
        (8, 2, 64, 3, 1, 1),
        (8, 2, 64, 3, 2, 0),
        (16, 1, 5, 5, 1, 2),
        (4, 3, 33, 1, 1, 0),
        (2, 3, 130, 3, 2, 2),
    ];
    for (d, bits, o, k, stride, padding) in cases {
        let table = EmbeddingTable::random(d, q(bits), &mut rng).unwrap();
        let merged = merge_table(&table);
        let shape = [o, 3 * d, k, k];
        let signs: Vec<bool> = (0..o * 3 * d * k * k).map(|_| lcg(&mut seed) & 1 == 1).collect();
        let w = PackedWeights::from_signs(shape, &signs, vec![1.0; o]).unwrap();
        let pixels: Vec<u8> = (0..2 * 7 * 9 * 3).map(|_| lcg(&mut seed) as u8).collect();
        let images = ImageBatch::new(2, 7, 9, pixels).unwrap();
        let reference = packed_conv2d(&pack_activations(&embed_infer(&images, &merged)).unwrap(), &w, stride, padding).unwrap();
        let fused = FusedEmbeddingConv::new(&merged, &w).unwrap();
        assert_eq!(fused.forward(&images, stride, padding).unwrap(), reference, "d={d} o={o} k={k}");
        assert_eq!(fused.forward_scalar(&images, stride, padding).unwrap(), reference);
    }
}

#[test]
fn fused_kernel_rejects_wide_codes() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let table = EmbeddingTable::random(32, q(3), &mut rng).unwrap();
    let w = PackedWeights::from_signs([1, 96, 1, 1], &[true; 96], vec![1.0]).unwrap();
    assert!(FusedEmbeddingConv::new(&merge_table(&table), &w).is_err());
}

#[test]
fn channels_last_packing_matches_planar() {
    let codes: Vec<u8> = (0..2 * 70 * 3 * 2).map(|i| (i * 7 % 4) as u8).collect();
    let qc = QuantizedCode::new(&[2, 70, 3, 2], codes, q(2)).unwrap();
    let mut nhwc = Vec::new();
    for i in 0..2 {
        for p in 0..6 {
            for ch in 0..70 {
                nhwc.push(qc.codes()[(i * 70 + ch) * 6 + p]);
            }
        }
    }
    let a = pack_channels_last([2, 70, 3, 2], &nhwc, q(2)).unwrap();
    assert_eq!(a, pack_activations(&qc).unwrap());
    assert!(pack_channels_last([1, 1, 1, 1], &[4], q(2)).is_err());
}

#[test]
fn accumulators_expose_both_layouts() {
    let codes = QuantizedCode::new(&[1, 1, 1, 2], vec![1, 2], q(2)).unwrap();
    let x = pack_activations(&codes).unwrap();
    let w = PackedWeights::from_signs([2, 1, 1, 1], &[true, false], vec![1.0, 1.0]).unwrap();
    let acc = packed_conv2d(&x, &w, 1, 0).unwrap();
    assert_eq!(acc.values(), &[1, -1, 2, -2]);
    assert_eq!(acc.to_nchw(), vec![1, 2, -1, -2]);
    assert_eq!(acc.get(0, 1, 0, 1), -2);
}

proptest! {
    #[test]
    fn pack_round_trips_across_lane_boundaries(
        c in prop::sample::select(vec![1usize, 63, 64, 65, 130]),
        bits in 1u8..=8,
        seed in any::<u64>(),
    ) {
        let cfg = q(bits);
        let len = 2 * c * 2 * 3;
        let mut s = seed;
        let codes: Vec<u8> = (0..len).map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as u8) & cfg.max_code()
        }).collect();
        let qc = QuantizedCode::new(&[2, c, 2, 3], codes, cfg).unwrap();
        let packed = pack_activations(&qc).unwrap();
        for (idx, &word) in packed.storage().iter().enumerate() {
            let wi = idx % packed.words_per_plane();
            prop_assert_eq!(word & !lane_mask(c, wi), 0);
        }
        prop_assert_eq!(packed.unpack(), qc);
    }
}
