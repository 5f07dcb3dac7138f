mod common;

use proptest::prelude::*;
use tse_core::checkpoint::{decode_checkpoint, encode_checkpoint, CheckpointHeader};
use tse_core::frontend::{decode_features, encode_features, FeatureStack};
use tse_core::model::Model;
use tse_core::tokenizer::{decode_codebook, decode_tokens, encode_codebook, encode_tokens, Codebook, TokenGrid, TrainMeta};
use tse_core::trainer::TrainConfig;
use tse_core::Error;

fn stack() -> impl Strategy<Value = FeatureStack> {
    (1usize..4, 1usize..6, 1usize..5).prop_flat_map(|(n, t, e)| {
        prop::collection::vec(-1e3f64..1e3, n * t * e).prop_map(move |d| FeatureStack::new(n, t, e, d).unwrap())
    })
}

fn grid() -> impl Strategy<Value = TokenGrid> {
    (1usize..4, 1usize..20, 1usize..300).prop_flat_map(|(n, t, k)| {
        prop::collection::vec(0..k as u32, n * t).prop_map(move |tok| TokenGrid::new(n, t, k, tok).unwrap())
    })
}

fn meta(layers: usize) -> TrainMeta {
    TrainMeta {
        layer_ids: (1..=layers as u32).collect(),
        iterations: vec![3; layers],
        inertia: vec![0.1 + 1.0 / 3.0; layers],
        seed: 4,
        max_iter: 100,
        tol: 1e-6,
        frames: 17,
    }
}

proptest! {
    #[test]
    fn feat1_round_trips(fs in stack()) {
        prop_assert_eq!(decode_features(&encode_features(&fs, 8).unwrap()).unwrap(), fs.clone());
        let narrow = decode_features(&encode_features(&fs, 4).unwrap()).unwrap();
        for (a, b) in fs.data.iter().zip(&narrow.data) {
            prop_assert_eq!(*b, *a as f32 as f64);
        }
    }

    #[test]
    fn tok1_round_trips(g in grid()) {
        prop_assert_eq!(decode_tokens(&encode_tokens(&g)).unwrap(), g);
    }

    #[test]
    fn kmc1_round_trips(layers in 1usize..4, k in 2usize..6, dim in 1usize..5, seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..layers * k * dim).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let cb = Codebook::new(k, dim, data, meta(layers)).unwrap();
        let back = decode_codebook(&encode_codebook(&cb)).unwrap();
        prop_assert_eq!(back.hash(), cb.hash());
        prop_assert_eq!(back, cb);
    }

    #[test]
    fn truncated_files_are_rejected(g in grid(), cut in 1usize..8) {
        let bytes = encode_tokens(&g);
        let is_format_error = matches!(decode_tokens(&bytes[..bytes.len() - cut.min(bytes.len())]), Err(Error::Format { .. }));
        prop_assert!(is_format_error);
    }
}

fn tiny_checkpoint() -> (CheckpointHeader, Model) {
    let model = Model::new(common::tiny_model(false)).unwrap();
    let header = CheckpointHeader {
        model: model.cfg.clone(),
        frontend: Default::default(),
        train: TrainConfig::default(),
        codebook_hash: "00".into(),
        config_hash: "11".into(),
        step: 0,
    };
    (header, model)
}

#[test]
fn checkpoint_round_trips_with_and_without_optimizer_state() {
    let (header, model) = tiny_checkpoint();
    let bytes = encode_checkpoint(&header, &model, None).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.header, header);
    assert!(back.optimizer.is_none());
    assert_eq!(encode_checkpoint(&back.header, &back.model, None).unwrap(), bytes);

    let mut state = tse_tensor::AdamWState::new(&model.store);
    state.step = 5;
    for (m, (_, p)) in state.m.iter_mut().zip(model.store.iter()) {
        *m = p.value.clone();
    }
    let mut header = header;
    header.step = 5;
    let bytes = encode_checkpoint(&header, &model, Some(&state)).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.optimizer.as_ref(), Some(&state));
    assert_eq!(encode_checkpoint(&back.header, &back.model, back.optimizer.as_ref()).unwrap(), bytes);
}

#[test]
fn every_single_byte_corruption_of_a_checkpoint_is_caught() {
    let (header, model) = tiny_checkpoint();
    let bytes = encode_checkpoint(&header, &model, None).unwrap();
    for i in (0..bytes.len()).step_by(7) {
        let mut bad = bytes.clone();
        bad[i] ^= 0x10;
        assert!(decode_checkpoint(&bad).is_err(), "flip at byte {i} accepted");
    }
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn header_must_describe_the_model() {
    let (mut header, model) = tiny_checkpoint();
    header.model.d_model += 2;
    assert!(encode_checkpoint(&header, &model, None).is_err());
}
