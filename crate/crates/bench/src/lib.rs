//! Shared fixtures for the benchmarks.

use fskws_core::dsp::{DspConfig, MfccExtractor, MfccSequence, Waveform};
use fskws_core::rng;
use fskws_core::source::{OracleGenConfig, OracleSource, SampleSource};
use ndarray::Array2;
use rand::Rng;

/// One second of rendered synthetic keyword audio per clip.
pub fn clips(n: usize, seed: u64) -> Vec<Waveform> {
    let source = OracleSource::new(OracleGenConfig::default()).expect("default generator config");
    let mut r = rng::stream(seed, "bench");
    (0..n)
        .map(|_| {
            let c = source.new_class(&mut r).expect("class");
            source.render(&c, &mut r).expect("render").fit_to_len(16_000)
        })
        .collect()
}

pub fn features(n: usize, seed: u64) -> Vec<MfccSequence> {
    let ex = MfccExtractor::new(&DspConfig::default()).expect("default dsp config");
    clips(n, seed).iter().map(|w| ex.featurize(w).expect("featurize")).collect()
}

/// Random `rows x dim` matrix with entries in [-1, 1).
pub fn embeddings(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::item(seed);
    Array2::from_shape_fn((rows, dim), |_| r.gen_range(-1.0..1.0))
}
