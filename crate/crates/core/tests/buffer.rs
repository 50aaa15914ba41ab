use std::collections::HashSet;

use fskws_core::augment::{AugmentConfig, Augmenter};
use fskws_core::buffer::{BufferConfig, EpisodeBuffer, SlotFactory};
use fskws_core::dsp::{DspConfig, MfccExtractor};
use fskws_core::rng;
use fskws_core::source::{OracleGenConfig, OracleSource};

struct Fixture {
    source: OracleSource,
    augmenter: Augmenter,
    extractor: MfccExtractor,
}

impl Fixture {
    fn new() -> Self {
        Self {
            source: OracleSource::new(OracleGenConfig::default()).unwrap(),
            augmenter: Augmenter::from_config(&AugmentConfig::default()).unwrap(),
            extractor: MfccExtractor::new(&DspConfig::default()).unwrap(),
        }
    }

    fn factory(&self) -> SlotFactory<'_> {
        SlotFactory { source: &self.source, augmenter: Some(&self.augmenter), extractor: &self.extractor }
    }
}

fn cfg(m: usize, k: usize, upd: usize) -> BufferConfig {
    BufferConfig { m_buffer: m, m_update: upd, k_shots: k, n_way: 2 }
}

#[test]
fn init_sizes_and_unique_classes() {
    let fx = Fixture::new();
    let buf = EpisodeBuffer::init(&fx.factory(), &cfg(4, 2, 1), &mut rng::stream(1, "buffer")).unwrap();
    assert_eq!(buf.len(), 4);
    assert_eq!(buf.view_count(), 12);
    let ids: HashSet<u64> = buf.slots().map(|s| s.class.class_id).collect();
    assert_eq!(ids.len(), 4);
    for s in buf.slots() {
        assert!(s.views.iter().all(|v| v.n_frames() == 98 && v.n_coeffs() == 40));
    }
}

#[test]
fn refresh_is_fifo_with_full_turnover() {
    let fx = Fixture::new();
    let mut r = rng::stream(2, "buffer");
    let mut buf = EpisodeBuffer::init(&fx.factory(), &cfg(4, 1, 1), &mut r).unwrap();
    let original: Vec<u64> = buf.slots().map(|s| s.class.class_id).collect();
    buf.refresh(&fx.factory(), &mut r).unwrap();
    let after: Vec<u64> = buf.slots().map(|s| s.class.class_id).collect();
    assert_eq!(&after[..3], &original[1..]);
    assert!(!original.contains(&after[3]));
    for _ in 0..3 {
        buf.refresh(&fx.factory(), &mut r).unwrap();
    }
    assert!(buf.slots().all(|s| !original.contains(&s.class.class_id)));
    assert_eq!(buf.len(), 4);
}

#[test]
fn zero_update_is_a_no_op() {
    let fx = Fixture::new();
    let mut r = rng::stream(3, "buffer");
    let mut buf = EpisodeBuffer::init(&fx.factory(), &cfg(2, 1, 0), &mut r).unwrap();
    let before = buf.manifest();
    buf.refresh(&fx.factory(), &mut r).unwrap();
    assert_eq!(buf.manifest(), before);
}

#[test]
fn generation_ignores_worker_count() {
    let fx = Fixture::new();
    let features = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let buf = EpisodeBuffer::init(&fx.factory(), &cfg(3, 1, 1), &mut rng::stream(4, "buffer")).unwrap();
            buf.slots().flat_map(|s| s.views.iter().map(|v| v.frames().clone())).collect::<Vec<_>>()
        })
    };
    assert_eq!(features(1), features(3));
}
