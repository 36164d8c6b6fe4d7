use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use turbstoch::diffcore::{AdamState, Tensor3};
use turbstoch::unet::{
    build_model, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Mode, ModelSpec, UNetModel,
};
use turbstoch::Error;

fn noise(seed: u64, batch: usize, len: usize) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor3::new(batch, 1, len, (0..batch * len).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// A default model whose running statistics have seen a few batches.
fn warmed_model(seed: u64) -> UNetModel {
    let mut m = build_model(seed);
    for i in 0..3 {
        m.run(&noise(100 + i, 2, 512), Mode::Train).unwrap();
    }
    m
}

#[test]
fn parameter_count_matches_layer_walk() {
    // (cin, cout, k) of every conv layer; each carries a bias and BN scale/shift
    let layers = [
        (1, 16, 1),
        (16, 32, 2),
        (32, 64, 4),
        (64, 128, 8),
        (128, 256, 16),
        (256, 128, 16),
        (128, 64, 8),
        (64, 32, 16),
        (32, 16, 32),
        (16, 1, 64),
    ];
    let expected: usize = layers.iter().map(|&(ci, co, k)| ci * co * k + 3 * co).sum();
    assert_eq!(expected, 1_241_267);
    assert_eq!(ModelSpec::default().param_count(), expected);
    assert_eq!(build_model(0).param_count(), expected);
}

#[test]
fn output_shape_follows_input() {
    let mut m = build_model(1);
    let y = m.run(&noise(0, 1, 40960), Mode::Train).unwrap();
    assert_eq!(y.shape(), (1, 1, 40960));
    let bad = m.run(&noise(0, 1, 30), Mode::Train);
    assert!(matches!(bad, Err(Error::Shape(_))));
    let two_channels = Tensor3::zeros(1, 2, 64);
    assert!(matches!(m.run(&two_channels, Mode::Train), Err(Error::Shape(_))));
}

#[test]
fn eval_before_training_is_rejected() {
    let m = build_model(2);
    assert!(matches!(m.infer(&noise(0, 1, 64)), Err(Error::UninitializedStats(_))));
}

#[test]
fn zero_network_outputs_zero() {
    let mut m = build_model(3);
    for p in &mut m.params {
        p.value.data_mut().fill(0.0);
    }
    let y = m.run(&noise(1, 2, 256), Mode::Train).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn initialisation_is_deterministic_in_the_seed() {
    assert_eq!(build_model(5).flat_params(), build_model(5).flat_params());
    assert_ne!(build_model(5).flat_params(), build_model(6).flat_params());
}

#[test]
fn eval_mode_is_translation_covariant_by_the_pooling_period() {
    let m = warmed_model(7);
    let shift = m.spec.length_multiple();
    let len = 2048;
    let x = noise(9, 1, len + shift);
    let a = Tensor3::new(1, 1, len, x.data()[..len].to_vec()).unwrap();
    let b = Tensor3::new(1, 1, len, x.data()[shift..].to_vec()).unwrap();
    let (ya, yb) = (m.infer(&a).unwrap(), m.infer(&b).unwrap());
    let r = m.spec.receptive_radius();
    assert!(2 * r + shift < len);
    for i in r..len - r - shift {
        let (u, v) = (ya.data()[i + shift], yb.data()[i]);
        assert!((u - v).abs() <= 1e-10 * (1.0 + u.abs()), "index {i}: {u} vs {v}");
    }
}

#[test]
fn train_mode_updates_running_statistics() {
    let mut m = build_model(8);
    assert!(!m.stats_initialized());
    m.run(&noise(0, 2, 128), Mode::Train).unwrap();
    assert!(m.stats_initialized());
    assert!(m.bn.iter().all(|b| b.updates == 1));
    let before = m.bn.clone();
    m.infer(&noise(1, 1, 128)).unwrap();
    assert_eq!(before, m.bn);
}

#[test]
fn recalibration_averages_batch_statistics() {
    let batches = [noise(20, 2, 256), noise(21, 2, 256)];
    let mut fresh = build_model(9);
    let mut single = Vec::new();
    for x in &batches {
        let mut m = build_model(9);
        m.run(x, Mode::Train).unwrap();
        single.push(m.bn);
    }
    fresh.recalibrate_bn(batches.clone()).unwrap();
    let mut warmed = warmed_model(9);
    warmed.recalibrate_bn(batches.clone()).unwrap();
    assert_eq!(fresh.bn, warmed.bn);
    // one momentum step from (0, 1) gives m·s, (1 − m) + m·v
    let m = fresh.spec.bn_momentum;
    for (layer, r) in fresh.bn.iter().enumerate() {
        assert_eq!(r.updates, 2);
        for c in 0..r.mean.len() {
            let mean = 0.5 * (single[0][layer].mean[c] + single[1][layer].mean[c]) / m;
            let var = 0.5 * (single[0][layer].var[c] + single[1][layer].var[c] - 2.0 * (1.0 - m)) / m;
            assert!((r.mean[c] - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
            assert!((r.var[c] - var).abs() <= 1e-9 * (1.0 + var.abs()));
        }
    }
    assert!(fresh.recalibrate_bn(Vec::new()).is_err());
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let m = warmed_model(10);
    let adam = AdamState::new(&m.params);
    let meta = serde_json::json!({"epochs_completed": 3});
    let bytes = encode_checkpoint(&m, Some(&adam), Some(&meta));
    let c = decode_checkpoint(&bytes).unwrap();
    assert_eq!(c.model, m);
    assert_eq!(c.meta, Some(meta.clone()));
    assert_eq!(encode_checkpoint(&c.model, c.adam.as_ref(), c.meta.as_ref()), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.nntb");
    save_checkpoint(&path, &m, None, None).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.model, m);
    assert!(loaded.adam.is_none());
    let x = noise(4, 1, 256);
    let (ya, yb) = (m.infer(&x).unwrap(), loaded.model.infer(&x).unwrap());
    assert_eq!(ya.data(), yb.data());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let m = build_model(11);
    let bytes = encode_checkpoint(&m, None, None);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic { .. })));

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Version { found: 9, .. })));

    let mut bad = bytes.clone();
    bad[8] ^= 1;
    assert!(matches!(decode_checkpoint(&bad), Err(Error::SpecHash)));

    let mut bad = bytes.clone();
    bad[48] = 1;
    assert!(matches!(decode_checkpoint(&bad), Err(Error::UnsupportedFormat(_))));

    for cut in [3, 20, 60, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Truncated(_))), "cut at {cut}");
    }
}
