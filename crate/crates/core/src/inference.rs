//! Enrollment of target keywords and open-set detection against their prototypes.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::dsp::{DspConfig, MfccExtractor, MfccSequence, Waveform};
use crate::encoder::{sha256_hex, Encoder};
use crate::error::{Error, Result};
use crate::proto::{argmin, Distance, PrototypeSet};

pub const PROFILE_VERSION: u32 = 1;

/// Largest finite threshold; accepts every candidate.
pub const THRESHOLD_DISABLED: f64 = f64::MAX;

const EMBED_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub d_th: f64,
    pub distance: Distance,
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_th.is_nan() || self.d_th < 0.0 {
            return Err(Error::Config(format!("d_th must be a non-negative number, got {}", self.d_th)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prediction {
    /// Zero-based index of an enrolled keyword.
    Keyword(usize),
    Unknown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    pub predicted: Prediction,
    pub candidate: usize,
    pub distance: f64,
    pub all_distances: Vec<f64>,
}

impl DetectionResult {
    /// One-based class number with `n + 1` standing for unknown.
    pub fn class_number(&self, n: usize) -> usize {
        match self.predicted {
            Prediction::Keyword(i) => i + 1,
            Prediction::Unknown => n + 1,
        }
    }
}

/// Nearest prototype (ties to the lowest index), accepted only if strictly closer than `d_th`.
pub fn decide(distances: Vec<f64>, d_th: f64) -> Result<DetectionResult> {
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("distance".into()));
    }
    let candidate = argmin(&distances).ok_or_else(|| Error::Degenerate("no enrolled keywords".into()))?;
    let distance = distances[candidate];
    let predicted = if distance < d_th { Prediction::Keyword(candidate) } else { Prediction::Unknown };
    Ok(DetectionResult { predicted, candidate, distance, all_distances: distances })
}

/// Detection on an embedding that did not come from the encoder.
pub fn detect_embedding(protos: &PrototypeSet, embedding: ArrayView1<f64>, cfg: &DetectionConfig) -> Result<DetectionResult> {
    if embedding.len() != protos.prototypes.ncols() {
        return Err(Error::Shape(format!("embedding has {} dims, prototypes {}", embedding.len(), protos.prototypes.ncols())));
    }
    decide(protos.distances(embedding, cfg.distance), cfg.d_th)
}

/// SHA-256 of the canonical JSON form of a DSP config.
pub fn dsp_config_hash(cfg: &DspConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("plain struct").as_bytes())
}

/// Featurize and embed clips in fixed-size chunks; rows follow input order.
pub fn embed_waveforms(encoder: &Encoder<f32>, extractor: &MfccExtractor, clips: &[Waveform]) -> Result<Array2<f64>> {
    let feats = clips.iter().map(|w| extractor.featurize(w)).collect::<Result<Vec<_>>>()?;
    embed_features(encoder, &feats)
}

pub fn embed_features(encoder: &Encoder<f32>, feats: &[MfccSequence]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((feats.len(), encoder.config.embed_dim));
    for (i, chunk) in feats.chunks(EMBED_CHUNK).enumerate() {
        let refs: Vec<&MfccSequence> = chunk.iter().collect();
        let e = encoder.embed(&refs)?;
        out.slice_mut(ndarray::s![i * EMBED_CHUNK..i * EMBED_CHUNK + chunk.len(), ..]).assign(&e.mapv(f64::from));
    }
    Ok(out)
}

/// Enrolled keywords, their prototypes and the operating point.
#[derive(Clone, Debug, PartialEq)]
pub struct EnrollmentProfile {
    pub prototypes: PrototypeSet,
    pub detection: DetectionConfig,
    pub checkpoint_sha256: String,
    pub dsp_config_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    version: u32,
    class_names: Vec<String>,
    prototypes: Vec<Vec<f64>>,
    d_th: f64,
    distance: Distance,
    checkpoint_sha256: String,
    dsp_config_hash: String,
}

impl EnrollmentProfile {
    /// Prototype of each keyword from its support embeddings.
    pub fn from_embeddings(
        keywords: &[(String, Array2<f64>)],
        detection: DetectionConfig,
        checkpoint_sha256: String,
        dsp_config_hash: String,
    ) -> Result<Self> {
        detection.validate()?;
        if keywords.is_empty() {
            return Err(Error::Degenerate("no keywords to enroll".into()));
        }
        let dim = keywords[0].1.ncols();
        let mut protos = Array2::zeros((keywords.len(), dim));
        for (i, (name, e)) in keywords.iter().enumerate() {
            if e.nrows() == 0 {
                return Err(Error::Degenerate(format!("keyword {name} has no supports")));
            }
            if e.ncols() != dim {
                return Err(Error::Shape(format!("keyword {name} embeddings have {} dims, expected {dim}", e.ncols())));
            }
            protos.row_mut(i).assign(&e.mean_axis(Axis(0)).expect("non-empty"));
        }
        let prototypes = PrototypeSet::new(protos, keywords.iter().map(|(n, _)| n.clone()).collect())?;
        Ok(Self { prototypes, detection, checkpoint_sha256, dsp_config_hash })
    }

    pub fn class_names(&self) -> &[String] {
        &self.prototypes.class_ids
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ProfileFile {
            version: PROFILE_VERSION,
            class_names: self.prototypes.class_ids.clone(),
            prototypes: self.prototypes.prototypes.rows().into_iter().map(|r| r.to_vec()).collect(),
            d_th: self.detection.d_th,
            distance: self.detection.distance,
            checkpoint_sha256: self.checkpoint_sha256.clone(),
            dsp_config_hash: self.dsp_config_hash.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ProfileFile = serde_json::from_str(text)?;
        if f.version != PROFILE_VERSION {
            return Err(Error::Profile(format!("unsupported profile version {}", f.version)));
        }
        let dim = f.prototypes.first().map_or(0, Vec::len);
        if f.prototypes.iter().any(|r| r.len() != dim) {
            return Err(Error::Profile("ragged prototype matrix".into()));
        }
        let flat: Vec<f64> = f.prototypes.into_iter().flatten().collect();
        let protos = Array2::from_shape_vec((flat.len() / dim.max(1), dim), flat).map_err(|e| Error::Profile(e.to_string()))?;
        let detection = DetectionConfig { d_th: f.d_th, distance: f.distance };
        detection.validate()?;
        Ok(Self {
            prototypes: PrototypeSet::new(protos, f.class_names)?,
            detection,
            checkpoint_sha256: f.checkpoint_sha256,
            dsp_config_hash: f.dsp_config_hash,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::encoder::write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Rejects a front end other than the one the profile was enrolled with.
    pub fn check_dsp(&self, cfg: &DspConfig) -> Result<()> {
        let h = dsp_config_hash(cfg);
        if h != self.dsp_config_hash {
            return Err(Error::Profile("DSP configuration differs from the one used at enrollment".into()));
        }
        Ok(())
    }
}

/// Encoder, front end and profile bound together for querying audio.
pub struct Detector<'a> {
    pub encoder: &'a Encoder<f32>,
    pub extractor: &'a MfccExtractor,
    pub profile: &'a EnrollmentProfile,
}

impl<'a> Detector<'a> {
    pub fn new(encoder: &'a Encoder<f32>, extractor: &'a MfccExtractor, profile: &'a EnrollmentProfile) -> Result<Self> {
        profile.check_dsp(extractor.config())?;
        if profile.prototypes.prototypes.ncols() != encoder.config.embed_dim {
            return Err(Error::Profile("profile and encoder disagree on the embedding size".into()));
        }
        Ok(Self { encoder, extractor, profile })
    }

    pub fn detect(&self, query: &Waveform) -> Result<DetectionResult> {
        Ok(self.detect_batch(std::slice::from_ref(query))?.remove(0))
    }

    pub fn detect_batch(&self, queries: &[Waveform]) -> Result<Vec<DetectionResult>> {
        let emb = embed_waveforms(self.encoder, self.extractor, queries)?;
        emb.rows().into_iter().map(|e| detect_embedding(&self.profile.prototypes, e, &self.profile.detection)).collect()
    }
}

/// Build a profile by embedding each keyword's support clips.
pub fn enroll(
    encoder: &Encoder<f32>,
    extractor: &MfccExtractor,
    supports: &[(String, Vec<Waveform>)],
    detection: DetectionConfig,
    checkpoint_sha256: String,
) -> Result<EnrollmentProfile> {
    let keywords = supports
        .iter()
        .map(|(name, clips)| {
            if clips.is_empty() {
                return Err(Error::Degenerate(format!("keyword {name} has no supports")));
            }
            Ok((name.clone(), embed_waveforms(encoder, extractor, clips)?))
        })
        .collect::<Result<Vec<_>>>()?;
    EnrollmentProfile::from_embeddings(&keywords, detection, checkpoint_sha256, dsp_config_hash(extractor.config()))
}

/// One exported embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub label: String,
    pub file_id: String,
    pub values: Vec<f32>,
}

/// `label<TAB>file_id<TAB>v1 v2 ...`; values use the shortest exact decimal form.
pub fn format_embeddings(records: &[EmbeddingRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let vals: Vec<String> = r.values.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}\t{}\t{}", r.label, r.file_id, vals.join(" "));
    }
    out
}

pub fn parse_embeddings(text: &str) -> Result<Vec<EmbeddingRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || Error::Dataset(format!("embedding line {}: malformed", i + 1));
            let mut parts = line.splitn(3, '\t');
            let label = parts.next().ok_or_else(bad)?.to_string();
            let file_id = parts.next().ok_or_else(bad)?.to_string();
            let values = parts
                .next()
                .ok_or_else(bad)?
                .split_whitespace()
                .map(|v| v.parse::<f32>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            Ok(EmbeddingRecord { label, file_id, values })
        })
        .collect()
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    parse_embeddings(&text)
}

/// Embed labelled clips and write one record per clip.
pub fn export_embeddings(
    encoder: &Encoder<f32>,
    extractor: &MfccExtractor,
    clips: &[(String, String, Waveform)],
    out: impl AsRef<Path>,
) -> Result<usize> {
    let waves: Vec<Waveform> = clips.iter().map(|(_, _, w)| w.clone()).collect();
    let emb = embed_waveforms(encoder, extractor, &waves)?;
    let records: Vec<EmbeddingRecord> = clips
        .iter()
        .zip(emb.rows())
        .map(|((label, id, _), e)| EmbeddingRecord {
            label: label.clone(),
            file_id: id.clone(),
            values: e.iter().map(|&v| v as f32).collect(),
        })
        .collect();
    crate::encoder::write_atomic(out.as_ref(), format_embeddings(&records).as_bytes())?;
    Ok(records.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_protos() -> PrototypeSet {
        PrototypeSet::new(array![[0.0, 0.0], [10.0, 0.0]], vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn hand_computed_detection() {
        let cfg = DetectionConfig { d_th: 5.0, distance: Distance::Euclidean };
        let r = detect_embedding(&two_protos(), array![1.0, 0.0].view(), &cfg).unwrap();
        assert_eq!(r.candidate, 0);
        assert_eq!(r.distance, 1.0);
        assert_eq!(r.predicted, Prediction::Keyword(0));
        assert_eq!(r.class_number(2), 1);
        assert_eq!(r.all_distances, vec![1.0, 9.0]);
    }

    #[test]
    fn threshold_extremes() {
        let p = two_protos();
        let q = array![0.0, 0.0];
        let zero = DetectionConfig { d_th: 0.0, distance: Distance::Euclidean };
        let r = detect_embedding(&p, q.view(), &zero).unwrap();
        assert_eq!(r.predicted, Prediction::Unknown);
        assert_eq!(r.class_number(2), 3);
        let open = DetectionConfig { d_th: THRESHOLD_DISABLED, distance: Distance::SquaredEuclidean };
        let r = detect_embedding(&p, array![9.0, 3.0].view(), &open).unwrap();
        assert_eq!(r.predicted, Prediction::Keyword(1));
    }

    #[test]
    fn boundary_is_strict_and_ties_go_low() {
        let cfg = DetectionConfig { d_th: 5.0, distance: Distance::Euclidean };
        let r = detect_embedding(&two_protos(), array![5.0, 0.0].view(), &cfg).unwrap();
        assert_eq!(r.candidate, 0);
        assert_eq!(r.predicted, Prediction::Unknown);
    }

    #[test]
    fn negative_or_nan_threshold_rejected() {
        assert!(DetectionConfig { d_th: -1.0, distance: Distance::Euclidean }.validate().is_err());
        assert!(DetectionConfig { d_th: f64::NAN, distance: Distance::Euclidean }.validate().is_err());
    }

    #[test]
    fn profile_json_round_trip() {
        let det = DetectionConfig { d_th: 2.5, distance: Distance::SquaredEuclidean };
        let kws = vec![("yes".to_string(), array![[1.0, 2.0], [3.0, 4.0]]), ("no".to_string(), array![[0.1, 0.2]])];
        let p = EnrollmentProfile::from_embeddings(&kws, det, "abc".into(), dsp_config_hash(&DspConfig::default())).unwrap();
        assert_eq!(p.prototypes.prototypes, array![[2.0, 3.0], [0.1, 0.2]]);
        let back = EnrollmentProfile::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
        assert!(back.check_dsp(&DspConfig::default()).is_ok());
        assert!(back.check_dsp(&DspConfig { cmn: true, ..DspConfig::default() }).is_err());
        let bumped = p.to_json().unwrap().replace("\"version\": 1", "\"version\": 9");
        assert!(EnrollmentProfile::from_json(&bumped).is_err());
    }

    #[test]
    fn embedding_text_round_trip() {
        let recs = vec![EmbeddingRecord { label: "yes".into(), file_id: "a.wav".into(), values: vec![0.1, -3.25e-7, 1e30, 0.0] }];
        assert_eq!(parse_embeddings(&format_embeddings(&recs)).unwrap(), recs);
        assert!(parse_embeddings("only-label\n").is_err());
    }
}
