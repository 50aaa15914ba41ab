//! Featurized evaluation corpora built from a sample source or a directory dataset.

use std::path::PathBuf;

use rand::{Rng, RngCore};
use rayon::prelude::*;

use crate::augment::{add_noise, NoiseProvider};
use crate::dsp::{read_wav, MfccExtractor, MfccSequence, Waveform};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::eval::EvalCorpus;
use crate::inference::embed_features;
use crate::rng;
use crate::source::{DirDataset, SampleSource};

/// Additive noise applied to test queries only.
pub struct QueryNoise<'a> {
    pub provider: &'a dyn NoiseProvider,
    pub snr_db_range: (f64, f64),
}

impl QueryNoise<'_> {
    fn apply(&self, w: &Waveform, rng: &mut dyn RngCore) -> Result<Waveform> {
        let (lo, hi) = self.snr_db_range;
        let snr = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let noise = self.provider.next(rng, w.len())?;
        let mut out = add_noise(w, &noise, snr)?;
        let clipped: Vec<f64> = out.samples().iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        out = Waveform::new(clipped, w.sample_rate())?;
        Ok(out)
    }
}

/// MFCC features per keyword, split into an enrollment pool and test queries.
#[derive(Clone, Debug)]
pub struct FeatureCorpus {
    pub keywords: Vec<String>,
    pub support: Vec<Vec<MfccSequence>>,
    pub test: Vec<Vec<MfccSequence>>,
}

impl FeatureCorpus {
    /// Fresh classes from `source`; each clip is rendered from its own seed.
    pub fn from_source(
        source: &dyn SampleSource,
        extractor: &MfccExtractor,
        n_classes: usize,
        n_support: usize,
        n_test: usize,
        seed: u64,
        noise: Option<&QueryNoise<'_>>,
    ) -> Result<Self> {
        let mut r = rng::stream(seed, "eval-corpus");
        let classes = (0..n_classes).map(|_| source.new_class(&mut r)).collect::<Result<Vec<_>>>()?;
        let plan: Vec<(usize, bool, u64)> = (0..n_classes)
            .flat_map(|c| (0..n_support + n_test).map(move |i| (c, i >= n_support)))
            .map(|(c, is_test)| (c, is_test, r.next_u64()))
            .collect();
        let feats = plan
            .par_iter()
            .map(|&(c, is_test, s)| {
                let mut vr = rng::item(s);
                let mut w = source.render(&classes[c], &mut vr)?;
                if let (true, Some(n)) = (is_test, noise) {
                    w = n.apply(&w, &mut vr)?;
                }
                extractor.featurize(&w)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut it = feats.into_iter();
        let mut support = Vec::with_capacity(n_classes);
        let mut test = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            support.push(it.by_ref().take(n_support).collect());
            test.push(it.by_ref().take(n_test).collect());
        }
        Ok(Self { keywords: classes.iter().map(|c| c.label()).collect(), support, test })
    }

    /// Train partition as the enrollment pool, test partition as queries.
    pub fn from_dataset(ds: &DirDataset, extractor: &MfccExtractor, seed: u64, noise: Option<&QueryNoise<'_>>) -> Result<Self> {
        let load = |paths: &[PathBuf], corrupt: bool, base: u64| -> Result<Vec<MfccSequence>> {
            paths
                .par_iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut w = read_wav(p)?;
                    if let (true, Some(n)) = (corrupt, noise) {
                        w = n.apply(&w, &mut rng::item(base ^ i as u64))?;
                    }
                    extractor.featurize(&w)
                })
                .collect()
        };
        let mut keywords = Vec::new();
        let (mut support, mut test) = (Vec::new(), Vec::new());
        for (k, kw) in ds.keywords().iter().enumerate() {
            if kw.test.is_empty() {
                return Err(Error::Dataset(format!("keyword {} has no test clips", kw.name)));
            }
            keywords.push(kw.name.clone());
            support.push(load(&kw.train, false, 0)?);
            let base = rng::stream(seed, "eval-noise").next_u64() ^ ((k as u64) << 32);
            test.push(load(&kw.test, true, base)?);
        }
        Ok(Self { keywords, support, test })
    }

    /// Embed every clip once.
    pub fn embed(&self, encoder: &Encoder<f32>) -> Result<EvalCorpus> {
        let support = self.support.iter().map(|s| embed_features(encoder, s)).collect::<Result<Vec<_>>>()?;
        let test = self.test.iter().map(|s| embed_features(encoder, s)).collect::<Result<Vec<_>>>()?;
        EvalCorpus::new(self.keywords.clone(), support, test)
    }
}
