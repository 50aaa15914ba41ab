use fskws_core::encoder::{adam_step, AdamState, Checkpoint, Encoder, EncoderConfig, Mode};
use fskws_core::rng;
use fskws_core::Error;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;

fn tiny() -> EncoderConfig {
    EncoderConfig { width_multiplier: 1, base_channels: vec![4, 6, 8, 12], gru_hidden: 8, embed_dim: 16, ..EncoderConfig::default() }
}

fn gaussian(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
    let mut r = rng::item(seed);
    Array3::from_shape_simple_fn(shape, || r.sample::<f64, _>(StandardNormal))
}

#[test]
fn default_output_shape() {
    let enc = Encoder::<f32>::new(&EncoderConfig::default(), &mut rng::item(1)).unwrap();
    let x = gaussian((3, 98, 40), 2).mapv(|v| v as f32);
    let y = enc.forward_infer(x.view()).unwrap();
    assert_eq!(y.dim(), (3, 192));
    assert!(y.iter().all(|v| v.is_finite()));
}

#[test]
fn default_parameter_count() {
    // Channels: stem 32, blocks 32->48, 48->64, 64->96; every block has a strided 1x1 shortcut.
    let block = |i: usize, o: usize| o * i * 9 + o * o * 9 + 4 * o + o * i + 2 * o;
    let stem = 40 * 3 * 32 + 2 * 32;
    let (b0, b1, b2) = (block(32, 48), block(48, 64), block(64, 96));
    let gru = 3 * 192 * 96 + 3 * 192 * 192 + 6 * 192;
    let proj = 192 * 192 + 192;
    let hand = stem + b0 + b1 + b2 + gru + proj;
    let cfg = EncoderConfig::default();
    assert_eq!(cfg.parameter_count(), hand);
    let enc = Encoder::<f32>::zeros(&cfg).unwrap();
    assert_eq!(enc.parameter_count(), hand);
    assert_eq!(hand, 457_312);
}

#[test]
fn inference_is_deterministic() {
    let enc = Encoder::<f64>::new(&tiny(), &mut rng::item(3)).unwrap();
    let x = gaussian((2, 20, 40), 4);
    assert_eq!(enc.forward_infer(x.view()).unwrap(), enc.forward_infer(x.view()).unwrap());
}

#[test]
fn zero_projection_gives_zero_embeddings() {
    let mut enc = Encoder::<f64>::new(&tiny(), &mut rng::item(5)).unwrap();
    enc.proj.weight.fill(0.0);
    enc.proj.bias.fill(0.0);
    let x = gaussian((3, 24, 40), 6);
    assert!(enc.forward_infer(x.view()).unwrap().iter().all(|&v| v == 0.0));
    let (y, _) = enc.forward(x.view(), Mode::Train).unwrap();
    assert!(y.iter().all(|&v| v == 0.0));
}

#[test]
fn short_sequences_are_rejected() {
    let enc = Encoder::<f64>::new(&tiny(), &mut rng::item(7)).unwrap();
    let x = gaussian((1, 7, 40), 8);
    assert!(matches!(enc.forward_infer(x.view()), Err(Error::SequenceTooShort { got: 7, min: 8 })));
    assert!(enc.forward_infer(gaussian((1, 8, 40), 8).view()).is_ok());
}

#[test]
fn nan_input_reports_layer() {
    let enc = Encoder::<f64>::new(&tiny(), &mut rng::item(9)).unwrap();
    let mut x = gaussian((2, 16, 40), 10);
    x[[0, 3, 5]] = f64::NAN;
    let err = enc.forward_infer(x.view()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteActivation { layer: 0, .. }));
}

#[test]
fn backward_is_linear_in_output_gradient() {
    let enc = Encoder::<f64>::new(&tiny(), &mut rng::item(11)).unwrap();
    let x = gaussian((4, 16, 40), 12);
    let mut probe = enc.clone();
    let (_, trace) = probe.forward_train(x.view()).unwrap();

    let zero = enc.backward(&trace, Array2::zeros((4, 16)).view()).unwrap();
    assert!(zero.trainable().iter().all(|p| p.data.iter().all(|&v| v == 0.0)));

    let g = gaussian((1, 4, 16), 13).into_shape_with_order((4, 16)).unwrap();
    let once = enc.backward(&trace, g.view()).unwrap();
    let twice = enc.backward(&trace, (&g * 2.0).view()).unwrap();
    for (a, b) in once.trainable().iter().zip(twice.trainable()) {
        for (x, y) in a.data.iter().zip(b.data) {
            assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{}", a.name);
        }
    }
}

#[test]
fn running_statistics_approach_batch_statistics() {
    let mut enc = Encoder::<f64>::new(&tiny(), &mut rng::item(14)).unwrap();
    for i in 0..80 {
        let x = gaussian((64, 16, 40), 100 + i);
        enc.forward_train(x.view()).unwrap();
    }
    let big = gaussian((1024, 16, 40), 999);
    let infer = enc.forward_infer(big.view()).unwrap();
    let (train, _) = enc.clone().forward_train(big.view()).unwrap();
    let diff = (&train - &infer).mapv(|v| v * v).sum().sqrt();
    let norm = train.mapv(|v| v * v).sum().sqrt();
    assert!(diff / norm <= 0.1, "relative gap {}", diff / norm);
}

fn train_run(seed: u64) -> Encoder<f32> {
    let mut enc = Encoder::<f32>::new(&tiny(), &mut rng::item(seed)).unwrap();
    let mut state = AdamState::new(&enc);
    for i in 0..100 {
        let x = gaussian((4, 16, 40), 500 + i).mapv(|v| v as f32);
        let (y, trace) = enc.forward_train(x.view()).unwrap();
        // Pull embeddings toward zero.
        let grads = enc.backward(&trace, (&y * 2.0).view()).unwrap();
        adam_step(&mut enc, &grads, &mut state, 1e-3).unwrap();
    }
    assert_eq!(state.step, 100);
    enc
}

#[test]
fn seeded_training_is_reproducible() {
    assert_eq!(train_run(21), train_run(21));
    assert_ne!(train_run(21), train_run(22));
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let enc = train_run(31);
    let mut ck = Checkpoint::new(enc);
    ck.step = 100;
    ck.rng = Some(rng::stream(31, "train"));
    ck.meta = serde_json::json!({"note": "test"});
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back.encoder, ck.encoder);
    assert_eq!(back.step, 100);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let hash = ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(fskws_core::encoder::file_sha256(&path).unwrap(), hash);
    assert_eq!(Checkpoint::<f32>::load(&path).unwrap().to_bytes().unwrap(), bytes);

    assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
    assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
}
