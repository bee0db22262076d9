use pixemb_core::data::{self, Dataset};
use pixemb_core::io::{self, Checkpoint, Mode, MAGIC, VERSION};
use pixemb_core::network::{ModelGraph, ModelSpec, Preset};
use pixemb_core::trainer::{train, TrainConfig};
use pixemb_core::{Error, ForwardMode, ParseErrorKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A briefly trained model, so batch-norm statistics are non-trivial.
fn trained(preset: Preset, d: usize, data: &Dataset) -> ModelGraph {
    let mut spec = ModelSpec::new(preset, d, data.num_classes());
    spec.height = data.height();
    spec.width = data.width();
    spec.widths = vec![8, 16];
    spec.blocks_per_stage = 1;
    let model = spec.build(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let mut cfg = TrainConfig::desk(3, 0);
    cfg.batch_size = 8;
    train(model, data, None, &cfg).unwrap().0
}

fn parse_kind(e: Error) -> (usize, ParseErrorKind) {
    match e {
        Error::Parse { offset, kind } => (offset, kind),
        other => panic!("expected a parse error, got {other}"),
    }
}

#[test]
fn both_modes_round_trip_byte_identically() {
    let toy = data::toy_separable(0);
    for preset in Preset::ALL {
        let model = trained(preset, 4, &toy);
        let bytes = io::save(&model, Mode::Train).unwrap();
        let back = io::load(&bytes).unwrap();
        assert_eq!(back.mode(), Mode::Train);
        assert_eq!(back.preset(), preset);
        assert_eq!(back, Checkpoint::Train(model.clone()));
        assert_eq!(back.to_bytes(), bytes);
        if preset == Preset::FpFirst {
            continue;
        }
        let bytes = io::save(&model, Mode::Infer).unwrap();
        let back = io::load(&bytes).unwrap();
        assert_eq!(back.mode(), Mode::Infer);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.packed().unwrap(), model.compile().unwrap());
    }
}

#[test]
fn loaded_models_predict_identically() {
    let set = data::synthetic(24, 3, 8, 8, 4).unwrap();
    for preset in [Preset::PixembFirst, Preset::IwqFirst, Preset::WqFirst] {
        let model = trained(preset, 2, &set);
        let images = set.images();
        let float = model.forward(images, ForwardMode::InferFloat).unwrap();
        let Checkpoint::Train(g) = io::load(&io::save(&model, Mode::Train).unwrap()).unwrap() else {
            panic!("mode changed");
        };
        assert_eq!(g.forward(images, ForwardMode::InferFloat).unwrap(), float);
        let packed = model.compile().unwrap().forward(images).unwrap();
        let Checkpoint::Infer(p) = io::load(&io::save(&model, Mode::Infer).unwrap()).unwrap() else {
            panic!("mode changed");
        };
        assert_eq!(p.forward(images).unwrap(), packed);
    }
}

#[test]
fn deployable_table_payload_is_512_bytes_for_d8_q2() {
    let toy = data::toy_separable(0);
    let model = trained(Preset::PixembFirst, 8, &toy);
    let packed = model.compile().unwrap();
    let payload = packed.merged_table().unwrap().to_payload();
    assert_eq!(payload.len(), 512);
    let bytes = io::save_infer(&packed);
    let mut framed = 512u32.to_le_bytes().to_vec();
    framed.extend_from_slice(&payload);
    assert!(bytes.windows(framed.len()).any(|w| w == framed.as_slice()));
}

#[test]
fn fp_first_has_no_deployable_packed_form() {
    let toy = data::toy_separable(0);
    let model = trained(Preset::FpFirst, 4, &toy);
    let packed = model.compile().unwrap();
    assert!(matches!(packed.forward(toy.images()), Err(Error::UnsupportedPath(_))));
    // The float first layer still serializes and reloads.
    let bytes = io::save_infer(&packed);
    assert_eq!(io::load(&bytes).unwrap().to_bytes(), bytes);
}

#[test]
fn header_corruption_is_reported_with_offsets() {
    let toy = data::toy_separable(0);
    let bytes = io::save(&trained(Preset::PixembFirst, 4, &toy), Mode::Train).unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), VERSION);

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert_eq!(parse_kind(io::load(&bad).unwrap_err()), (0, ParseErrorKind::BadMagic));

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(parse_kind(io::load(&bad).unwrap_err()), (4, ParseErrorKind::VersionMismatch(9)));

    let mut bad = bytes.clone();
    bad[6] = 7;
    let (offset, kind) = parse_kind(io::load(&bad).unwrap_err());
    assert_eq!(offset, 6);
    assert!(matches!(kind, ParseErrorKind::Malformed(_)));

    let mut bad = bytes.clone();
    bad[7] = 42;
    assert_eq!(parse_kind(io::load(&bad).unwrap_err()).0, 7);
}

#[test]
fn every_truncation_and_any_trailing_byte_fails() {
    let toy = data::toy_separable(0);
    let model = trained(Preset::PixembFirst, 4, &toy);
    for mode in [Mode::Train, Mode::Infer] {
        let bytes = io::save(&model, mode).unwrap();
        let cuts: Vec<usize> = (0..64).chain((64..bytes.len()).step_by(13)).collect();
        for cut in cuts {
            let (offset, kind) = parse_kind(io::load(&bytes[..cut]).unwrap_err());
            assert!(offset <= cut, "{mode:?} cut {cut}: offset {offset}");
            if cut >= 4 {
                assert!(
                    matches!(kind, ParseErrorKind::Truncated(_) | ParseErrorKind::Malformed(_)),
                    "{mode:?} cut {cut}: {kind}"
                );
            }
        }
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(
            parse_kind(io::load(&long).unwrap_err()),
            (bytes.len(), ParseErrorKind::TrailingBytes(1))
        );
    }
}

#[test]
fn random_corruption_never_panics() {
    let toy = data::toy_separable(0);
    let bytes = io::save(&trained(Preset::IwqFirst, 4, &toy), Mode::Infer).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    use rand::Rng;
    for _ in 0..300 {
        let mut bad = bytes.clone();
        for _ in 0..rng.gen_range(1..4) {
            let at = rng.gen_range(0..bad.len());
            bad[at] = rng.gen();
        }
        // Flips inside float payloads may still parse; the call must not panic.
        let _ = io::load(&bad);
    }
}
