//! One function per verb. Each returns what it wrote so callers and tests can inspect it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use fskws_core::augment::{Augmenter, DirNoise, NoiseProvider, SyntheticNoise};
use fskws_core::buffer::SlotFactory;
use fskws_core::corpus::{FeatureCorpus, QueryNoise};
use fskws_core::dsp::{read_wav, write_wav, MfccExtractor, Waveform};
use fskws_core::encoder::{file_sha256, write_atomic, Checkpoint, Encoder};
use fskws_core::eval::{evaluate as run_eval, format_records, format_table, EvalReport};
use fskws_core::inference::{enroll as enroll_profile, export_embeddings as export, Detector, EnrollmentProfile, Prediction};
use fskws_core::source::{format_class_manifest, ClassSpec, DirDataset, OracleSource, SampleSource};
use fskws_core::train::{run_training, TrainOutputs, Trainer};
use fskws_core::{rng, DetectionResult};
use rand::RngCore;
use rayon::prelude::*;

use crate::config::{ConfigError, RunConfig};

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")));
    files.sort();
    Ok(files)
}

fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn load_encoder(path: &Path) -> Result<(Encoder<f32>, String)> {
    let ckpt = Checkpoint::<f32>::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((ckpt.encoder, file_sha256(path)?))
}

fn noise_provider(cfg: &RunConfig) -> Result<Arc<dyn NoiseProvider>> {
    Ok(match &cfg.augment.noise_dir {
        Some(dir) => Arc::new(DirNoise::open(dir)?),
        None => Arc::new(SyntheticNoise(cfg.augment.synthetic_noise)),
    })
}

#[derive(Clone, Debug)]
pub struct GenerateOutputs {
    pub files: Vec<PathBuf>,
    pub manifest: PathBuf,
    pub classes: PathBuf,
}

/// Render `n_classes` synthetic keywords with `views` clips each into `out/<label>/`.
///
/// `manifest.tsv` has one line per clip: `file<TAB>class_id<TAB>label<TAB>view_seed<TAB>units`.
pub fn generate(cfg: &RunConfig, out: &Path, n_classes: usize, views: usize, augment: bool) -> Result<GenerateOutputs> {
    if n_classes == 0 || views == 0 {
        return Err(ConfigError("generate needs at least one class and one view".into()).into());
    }
    let source = OracleSource::new(cfg.oracle.clone())?;
    let augmenter = if augment { Some(Augmenter::from_config(&cfg.augment)?) } else { None };
    let mut r = rng::stream(cfg.seed, "generation");
    let classes = (0..n_classes).map(|_| source.new_class(&mut r)).collect::<fskws_core::Result<Vec<_>>>()?;
    let plan: Vec<(usize, usize, u64)> =
        (0..n_classes).flat_map(|c| (0..views).map(move |v| (c, v))).map(|(c, v)| (c, v, r.next_u64())).collect();

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for c in &classes {
        std::fs::create_dir_all(out.join(c.label()))?;
    }
    let rels = plan
        .par_iter()
        .map(|&(c, v, seed)| -> Result<String> {
            let class = &classes[c];
            let mut vr = rng::item(seed);
            let mut w = source.render(class, &mut vr)?;
            if let Some(a) = &augmenter {
                w = a.augment(&w, &mut vr)?;
            }
            let label = class.label();
            let rel = format!("{label}/{label}_{v:03}.wav");
            write_wav(out.join(&rel), &w)?;
            Ok(rel)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut manifest = String::new();
    for (rel, &(c, _, seed)) in rels.iter().zip(&plan) {
        let class = &classes[c];
        let units = match &class.spec {
            ClassSpec::Units(u) => u.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "),
            ClassSpec::Keyword(k) => k.clone(),
        };
        let _ = writeln!(manifest, "{rel}\t{}\t{}\t{seed}\t{units}", class.class_id, class.label());
    }
    let manifest_path = out.join("manifest.tsv");
    write_atomic(&manifest_path, manifest.as_bytes())?;
    let classes_path = out.join("classes.tsv");
    write_atomic(&classes_path, format_class_manifest(&classes).as_bytes())?;
    cfg.write_snapshot(out, "generate")?;
    Ok(GenerateOutputs { files: rels.iter().map(|r| out.join(r)).collect(), manifest: manifest_path, classes: classes_path })
}

pub fn train_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.output_dir.join("train")
}

/// Episodic training on the synthetic source; writes into `<output_dir>/train`.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutputs> {
    let dir = train_dir(cfg);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let source = OracleSource::new(cfg.oracle.clone())?;
    let extractor = MfccExtractor::new(&cfg.dsp)?;
    let augmenter = if cfg.augment.enabled { Some(Augmenter::from_config(&cfg.augment)?) } else { None };
    let factory = SlotFactory { source: &source, augmenter: augmenter.as_ref(), extractor: &extractor };
    let meta = serde_json::json!({ "config": cfg });

    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::<f32>::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            if ckpt.meta.get("run").and_then(|r| r.get("config")) != Some(&meta["config"]) {
                log::warn!("resuming from a checkpoint written under a different configuration");
            }
            let t = Trainer::resume(factory, ckpt)?;
            log::info!("resuming at step {} of {}", t.step_count(), t.config().total_steps);
            t
        }
        None => {
            let t = Trainer::new(factory, &cfg.buffer, &cfg.train, &cfg.encoder, cfg.seed)?;
            write_atomic(&dir.join("buffer.tsv"), t.buffer().manifest().as_bytes())?;
            t
        }
    };
    cfg.write_snapshot(&dir, "train")?;
    Ok(run_training(&mut trainer, &dir, &meta)?)
}

/// Every wav in each keyword folder of `supports` becomes a support clip.
pub fn enroll(cfg: &RunConfig, checkpoint: &Path, supports: &Path, keywords: &[String], out: &Path) -> Result<EnrollmentProfile> {
    let (encoder, sha) = load_encoder(checkpoint)?;
    let extractor = MfccExtractor::new(&cfg.dsp)?;
    let names: Vec<String> = if keywords.is_empty() {
        let mut dirs: Vec<String> = std::fs::read_dir(supports)
            .with_context(|| format!("reading support folder {}", supports.display()))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().to_str().map(str::to_string))
            .filter(|n| !n.starts_with('.') && !n.starts_with('_'))
            .collect();
        dirs.sort();
        dirs
    } else {
        keywords.to_vec()
    };
    if names.is_empty() {
        bail!("no keyword folders under {}", supports.display());
    }
    let mut sets = Vec::with_capacity(names.len());
    for name in names {
        let dir = supports.join(&name);
        if !dir.is_dir() {
            bail!("keyword folder {} does not exist", dir.display());
        }
        let clips = wav_files(&dir)?.iter().map(read_wav).collect::<fskws_core::Result<Vec<Waveform>>>()?;
        if clips.is_empty() {
            bail!("keyword folder {} has no wav files", dir.display());
        }
        sets.push((name, clips));
    }
    let profile = enroll_profile(&encoder, &extractor, &sets, cfg.detection(), sha)?;
    std::fs::create_dir_all(parent_dir(out))?;
    profile.save(out)?;
    cfg.write_snapshot(&parent_dir(out), "enroll")?;
    Ok(profile)
}

/// `file<TAB>label-or-unknown<TAB>distance-to-nearest-prototype`.
pub fn format_detection(path: &Path, result: &DetectionResult, profile: &EnrollmentProfile) -> String {
    let label = match result.predicted {
        Prediction::Keyword(i) => profile.class_names()[i].as_str(),
        Prediction::Unknown => "unknown",
    };
    format!("{}\t{label}\t{:.6}", path.display(), result.distance)
}

pub fn detect(cfg: &RunConfig, checkpoint: &Path, profile: &Path, d_th: Option<f64>, wavs: &[PathBuf]) -> Result<Vec<String>> {
    let (encoder, sha) = load_encoder(checkpoint)?;
    let mut profile = EnrollmentProfile::load(profile).with_context(|| format!("loading profile {}", profile.display()))?;
    if profile.checkpoint_sha256 != sha {
        bail!("profile was enrolled with a different checkpoint than {}", checkpoint.display());
    }
    if let Some(d) = d_th {
        profile.detection.d_th = d;
        profile.detection.validate().map_err(|e| ConfigError(e.to_string()))?;
    }
    let extractor = MfccExtractor::new(&cfg.dsp)?;
    let detector = Detector::new(&encoder, &extractor, &profile)?;
    let clips = wavs.iter().map(read_wav).collect::<fskws_core::Result<Vec<_>>>()?;
    let results = detector.detect_batch(&clips)?;
    Ok(wavs.iter().zip(&results).map(|(p, r)| format_detection(p, r, &profile)).collect())
}

#[derive(Clone, Debug)]
pub struct EvalOutputs {
    pub reports: Vec<EvalReport>,
    pub table: String,
    pub table_path: PathBuf,
    pub records_path: PathBuf,
}

pub fn eval_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.output_dir.join("eval")
}

/// Few-shot open-set trials on a keyword dataset, or on held-out synthetic classes when none is given.
pub fn evaluate(cfg: &RunConfig, checkpoint: Option<&Path>, untrained: bool, dataset: Option<&Path>) -> Result<EvalOutputs> {
    let encoder = match (checkpoint, untrained) {
        (Some(p), false) => load_encoder(p)?.0,
        (None, true) => Encoder::new(&cfg.encoder, &mut rng::stream(cfg.seed, "init"))?,
        _ => return Err(ConfigError("evaluate needs exactly one of --checkpoint or --untrained".into()).into()),
    };
    let extractor = MfccExtractor::new(&cfg.dsp)?;
    let mut er = rng::stream(cfg.seed, "evaluation");
    let (corpus_seed, trial_seed) = (er.next_u64(), er.next_u64());

    let provider = noise_provider(cfg)?;
    let noise = cfg.eval.query_snr_db.map(|snr_db_range| QueryNoise { provider: provider.as_ref(), snr_db_range });
    let features = match dataset.or(cfg.paths.dataset.as_deref()) {
        Some(root) => {
            let ds = DirDataset::open(root, &cfg.dataset)?;
            FeatureCorpus::from_dataset(&ds, &extractor, corpus_seed, noise.as_ref())?
        }
        None => {
            let source = OracleSource::new(cfg.oracle.clone())?;
            let e = &cfg.eval;
            FeatureCorpus::from_source(&source, &extractor, e.oracle_classes, e.oracle_support, e.oracle_test, corpus_seed, noise.as_ref())?
        }
    };
    let corpus = features.embed(&encoder)?;
    let spec = cfg.trial_spec(trial_seed);
    spec.check_corpus(&corpus).map_err(|e| ConfigError(e.to_string()))?;
    let reports = run_eval(&corpus, &spec)?;

    let rows: Vec<(String, EvalReport)> = reports.iter().map(|r| (cfg.eval.method.clone(), r.clone())).collect();
    let table = format_table(&rows);
    let dir = eval_dir(cfg);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let table_path = dir.join("report.txt");
    let records_path = dir.join("records.jsonl");
    write_atomic(&table_path, table.as_bytes())?;
    write_atomic(&records_path, format_records(&rows)?.as_bytes())?;
    cfg.write_snapshot(&dir, "evaluate")?;
    Ok(EvalOutputs { reports, table, table_path, records_path })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Partition {
    Train,
    Validation,
    Test,
    All,
}

/// Embed a dataset partition; file ids are paths relative to the dataset root.
pub fn export_embeddings(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, partition: Partition, out: &Path) -> Result<usize> {
    let (encoder, _) = load_encoder(checkpoint)?;
    let extractor = MfccExtractor::new(&cfg.dsp)?;
    let ds = DirDataset::open(dataset, &cfg.dataset)?;
    let mut paths = Vec::new();
    for kw in ds.keywords() {
        let parts: Vec<&Vec<PathBuf>> = match partition {
            Partition::Train => vec![&kw.train],
            Partition::Validation => vec![&kw.validation],
            Partition::Test => vec![&kw.test],
            Partition::All => vec![&kw.train, &kw.validation, &kw.test],
        };
        for p in parts.into_iter().flatten() {
            paths.push((kw.name.clone(), p.clone()));
        }
    }
    if paths.is_empty() {
        bail!("the selected partition of {} is empty", dataset.display());
    }
    let clips = paths
        .par_iter()
        .map(|(label, p)| {
            let id = p.strip_prefix(ds.root()).unwrap_or(p).display().to_string();
            Ok((label.clone(), id, read_wav(p)?))
        })
        .collect::<fskws_core::Result<Vec<_>>>()?;
    std::fs::create_dir_all(parent_dir(out))?;
    let n = export(&encoder, &extractor, &clips, out)?;
    cfg.write_snapshot(&parent_dir(out), "export-embeddings")?;
    Ok(n)
}
