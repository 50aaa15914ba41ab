use fskws_core::dsp::{DspConfig, MfccExtractor, Waveform, SAMPLE_RATE};
use fskws_core::encoder::{Encoder, EncoderConfig};
use fskws_core::inference::{
    detect_embedding, embed_waveforms, enroll, export_embeddings, read_embeddings, DetectionConfig, Detector, Prediction,
    THRESHOLD_DISABLED,
};
use fskws_core::proto::{argmax, class_posteriors, Distance, PrototypeSet};
use fskws_core::rng;
use fskws_core::source::{OracleGenConfig, OracleSource, SampleSource};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

#[test]
fn threshold_sweep_is_monotone() {
    let mut r = rng::item(1);
    let protos = Array2::from_shape_simple_fn((8, 16), || r.gen_range(-3.0..3.0));
    let set = PrototypeSet::new(protos, (0..8).map(|i| format!("k{i}")).collect()).unwrap();
    let queries = Array2::from_shape_simple_fn((1000, 16), || r.gen_range(-4.0..4.0));
    let mut violations = 0;
    for q in queries.rows() {
        let mut accepted = false;
        let mut cand = None;
        for i in 0..100 {
            let cfg = DetectionConfig { d_th: i as f64 * 2.0, distance: Distance::SquaredEuclidean };
            let d = detect_embedding(&set, q, &cfg).unwrap();
            let now = d.predicted != Prediction::Unknown;
            if accepted && !now {
                violations += 1;
            }
            if *cand.get_or_insert(d.candidate) != d.candidate {
                violations += 1;
            }
            accepted = now;
        }
        let p = class_posteriors(q, &set, Distance::SquaredEuclidean).unwrap();
        assert_eq!(argmax(&p), cand);
    }
    assert_eq!(violations, 0);
}

struct Fx {
    encoder: Encoder<f32>,
    extractor: MfccExtractor,
    clips: Vec<Waveform>,
}

fn fixture(n: usize) -> Fx {
    let cfg = EncoderConfig { width_multiplier: 1, gru_hidden: 32, ..EncoderConfig::default() };
    let mut encoder = Encoder::<f32>::new(&cfg, &mut rng::item(2)).unwrap();
    // Running statistics from a few batches so inference sees realistic scales.
    let src = OracleSource::new(OracleGenConfig::default()).unwrap();
    let extractor = MfccExtractor::new(&DspConfig::default()).unwrap();
    let mut r = rng::item(3);
    let class = src.new_class(&mut r).unwrap();
    let clips: Vec<Waveform> = (0..n).map(|_| src.render(&class, &mut r).unwrap()).collect();
    let feats: Vec<_> = clips.iter().map(|c| extractor.featurize(c).unwrap()).collect();
    let refs: Vec<_> = feats.iter().collect();
    let x = fskws_core::encoder::stack_features::<f32>(&refs).unwrap();
    encoder.forward_train(x.view()).unwrap();
    Fx { encoder, extractor, clips }
}

#[test]
fn enrollment_means() {
    let fx = fixture(5);
    let det = DetectionConfig { d_th: THRESHOLD_DISABLED, distance: Distance::SquaredEuclidean };
    let single: Vec<(String, Vec<Waveform>)> =
        fx.clips.iter().take(2).enumerate().map(|(i, c)| (format!("k{i}"), vec![c.clone()])).collect();
    let p1 = enroll(&fx.encoder, &fx.extractor, &single, det, "h".into()).unwrap();
    let emb = embed_waveforms(&fx.encoder, &fx.extractor, &fx.clips).unwrap();
    assert_eq!(p1.prototypes.prototypes.row(0), emb.row(0));
    assert_eq!(p1.prototypes.prototypes.row(1), emb.row(1));

    let five = vec![("k".to_string(), fx.clips.clone())];
    let p5 = enroll(&fx.encoder, &fx.extractor, &five, det, "h".into()).unwrap();
    let brute: Array1<f64> = (0..5).map(|i| emb.row(i).to_owned()).fold(Array1::zeros(emb.ncols()), |a, b| a + b) / 5.0;
    assert!((&p5.prototypes.prototypes.row(0) - &brute).iter().all(|d| d.abs() <= 1e-12));

    let doubled = vec![("k".to_string(), fx.clips.iter().chain(&fx.clips).cloned().collect())];
    let p10 = enroll(&fx.encoder, &fx.extractor, &doubled, det, "h".into()).unwrap();
    assert!((&p10.prototypes.prototypes - &p5.prototypes.prototypes).iter().all(|d| d.abs() <= 1e-12));

    assert!(enroll(&fx.encoder, &fx.extractor, &[], det, "h".into()).is_err());
    assert!(enroll(&fx.encoder, &fx.extractor, &[("e".into(), vec![])], det, "h".into()).is_err());
}

#[test]
fn detector_self_consistency() {
    let fx = fixture(3);
    let det = DetectionConfig { d_th: THRESHOLD_DISABLED, distance: Distance::SquaredEuclidean };
    let sup: Vec<(String, Vec<Waveform>)> = fx.clips.iter().enumerate().map(|(i, c)| (format!("k{i}"), vec![c.clone()])).collect();
    let profile = enroll(&fx.encoder, &fx.extractor, &sup, det, "h".into()).unwrap();
    let d = Detector::new(&fx.encoder, &fx.extractor, &profile).unwrap();
    for (i, c) in fx.clips.iter().enumerate() {
        let r = d.detect(c).unwrap();
        assert_eq!(r.predicted, Prediction::Keyword(i));
        assert_eq!(r.distance, 0.0);
    }
    let mut closed = profile.clone();
    closed.detection.d_th = 0.0;
    let d0 = Detector::new(&fx.encoder, &fx.extractor, &closed).unwrap();
    assert!(d0.detect_batch(&fx.clips).unwrap().iter().all(|r| r.predicted == Prediction::Unknown));
    let other = MfccExtractor::new(&DspConfig { cmn: true, ..DspConfig::default() }).unwrap();
    assert!(Detector::new(&fx.encoder, &other, &profile).is_err());
}

#[test]
fn export_cardinality_and_round_trip() {
    let fx = fixture(6);
    let mut clips: Vec<(String, String, Waveform)> =
        fx.clips.iter().enumerate().map(|(i, c)| ("kw".into(), format!("clip{i}.wav"), c.clone())).collect();
    clips.push(("kw".into(), "clip0-again.wav".into(), fx.clips[0].clone()));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.tsv");
    assert_eq!(export_embeddings(&fx.encoder, &fx.extractor, &clips, &path).unwrap(), 7);
    let recs = read_embeddings(&path).unwrap();
    assert_eq!(recs.len(), 7);
    assert!(recs.iter().all(|r| r.values.len() == 192));
    assert_eq!(recs[0].values, recs[6].values);
    let waves: Vec<Waveform> = clips.iter().map(|c| c.2.clone()).collect();
    let emb = embed_waveforms(&fx.encoder, &fx.extractor, &waves).unwrap();
    for (rec, row) in recs.iter().zip(emb.axis_iter(Axis(0))) {
        for (a, b) in rec.values.iter().zip(row) {
            assert!((f64::from(*a) - b).abs() <= 1e-6 * b.abs().max(1e-30));
        }
    }
}

#[test]
fn short_audio_is_padded_to_clip_length() {
    let fx = fixture(1);
    let tiny = Waveform::new(vec![0.1; 400], SAMPLE_RATE).unwrap();
    assert!(embed_waveforms(&fx.encoder, &fx.extractor, &[tiny]).is_ok());
}
