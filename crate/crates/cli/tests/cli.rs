use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fskws_cli::config::RunConfig;
use fskws_core::dsp::{DspConfig, MfccExtractor};
use fskws_core::encoder::{file_sha256, Checkpoint, Encoder};
use fskws_core::inference::{enroll, EnrollmentProfile};
use fskws_core::train::read_loss_log;

const TINY: &str = r#"
seed = 7

[encoder]
width_multiplier = 1
base_channels = [8, 8, 12, 16]
gru_hidden = 16
embed_dim = 32

[buffer]
m_buffer = 16
n_way = 4
k_shots = 2

[train]
n_way = 4
k_shots = 2
total_steps = 40
lr = 0.003
checkpoint_every = 10

[augment]
enabled = false

[eval]
n_targets = 2
n_unknown = 3
k_shots = [1, 5, 20]
n_trials = 2
oracle_classes = 5
oracle_support = 20
oracle_test = 2
"#;

struct Env {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.toml");
        std::fs::write(&config, TINY).unwrap();
        Self { dir, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn cmd(&self) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_fskws"));
        c.env_remove("FSKWS_CONFIG").arg("--config").arg(&self.config);
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd().args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn tiny_checkpoint(&self, name: &str, seed: u64) -> PathBuf {
        let cfg = RunConfig::from_toml_with_overrides(TINY, &[]).unwrap();
        let enc = Encoder::<f32>::new(&cfg.encoder, &mut fskws_core::rng::item(seed)).unwrap();
        let path = self.path(name);
        Checkpoint::new(enc).save(&path).unwrap();
        path
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn generate_writes_clips_and_reproducible_manifests() {
    let env = Env::new();
    let a = env.path("a");
    let b = env.path("b");
    env.ok(&["generate", "--n-classes", "2", "--views", "3", "--out", s(&a)]);
    env.ok(&["--workers", "1", "generate", "--n-classes", "2", "--views", "3", "--out", s(&b)]);

    let manifest = String::from_utf8(read(a.join("manifest.tsv"))).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines.len(), 6);
    for line in &lines {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f.len(), 5);
        assert!(a.join(f[0]).is_file());
        let n_units = f[4].split(' ').count();
        assert!((10..=20).contains(&n_units), "{n_units} units");
    }
    for rel in ["manifest.tsv", "classes.tsv", "generate.config.toml"] {
        assert_eq!(read(a.join(rel)), read(b.join(rel)), "{rel}");
    }
    for line in &lines {
        let rel = line.split('\t').next().unwrap();
        assert_eq!(read(a.join(rel)), read(b.join(rel)), "{rel}");
    }

    let c = env.path("c");
    env.ok(&["--seed", "8", "generate", "--n-classes", "2", "--views", "3", "--out", s(&c)]);
    assert_ne!(read(a.join("manifest.tsv")), read(c.join("manifest.tsv")));
    let snap = RunConfig::load(Some(&c.join("generate.config.toml")), &[]).unwrap();
    assert_eq!(snap.seed, 8);
}

#[test]
fn training_is_reproducible_and_resumable() {
    let env = Env::new();
    let run = env.path("run");
    let stdout = env.ok(&["--output-dir", s(&run), "train"]);
    assert!(stdout.contains("final.ckpt"));
    let train = run.join("train");
    let log = read_loss_log(&train.join("loss.jsonl")).unwrap();
    assert_eq!(log.len(), 40);
    let mean = |r: &[fskws_core::StepRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    assert!(mean(&log[30..]) < mean(&log[..10]), "loss did not decrease");
    for step in [10, 20, 30] {
        assert!(train.join(format!("step-{step:08}.ckpt")).is_file());
    }

    let files = ["loss.jsonl", "buffer.tsv", "train.config.toml", "final.ckpt", "step-00000020.ckpt"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| read(train.join(f))).collect();
    env.ok(&["--output-dir", s(&run), "train"]);
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&read(train.join(f)), bytes, "{f} differs on rerun");
    }

    let resumed = env.path("resumed");
    env.ok(&["--output-dir", s(&resumed), "train", "--resume", s(&train.join("step-00000020.ckpt"))]);
    let tail = read_loss_log(&resumed.join("train/loss.jsonl")).unwrap();
    assert_eq!(tail.first().map(|r| r.step), Some(20));
    assert_eq!(tail, log[20..]);
    let a = Checkpoint::<f32>::load(train.join("final.ckpt")).unwrap();
    let b = Checkpoint::<f32>::load(resumed.join("train/final.ckpt")).unwrap();
    assert_eq!(b.step, 40);
    let bits = |c: &Checkpoint<f32>| c.encoder.params().iter().flat_map(|p| p.data.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn config_errors_and_runtime_errors_have_distinct_exit_codes() {
    let env = Env::new();
    let code = |args: &[&str]| env.run(args).status.code().unwrap();

    assert_eq!(code(&["--set", "train.learning_rate=1", "train"]), 2);
    assert_eq!(code(&["--set", "buffer.k_shots=3", "train"]), 2);
    assert_eq!(code(&["--set", "detect.distance=euclidean", "train"]), 2);
    assert_eq!(code(&["--workers", "0", "generate", "--n-classes", "1", "--views", "1", "--out", s(&env.path("g"))]), 2);
    assert_eq!(code(&["no-such-verb"]), 2);
    assert_eq!(code(&["evaluate"]), 2);
    let out = env.run(&["--set", "train.total_steps=0", "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration"));

    let mut c = Command::new(env!("CARGO_BIN_EXE_fskws"));
    let out = c.args(["--config", "/nonexistent/run.toml", "train"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = env.run(&["evaluate", "--checkpoint", "/nonexistent/model.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.ckpt"));
    assert_eq!(code(&["export-embeddings", "--checkpoint", "x.ckpt", "--dataset", "/nonexistent/ds"]), 1);
}

fn write_supports(env: &Env, name: &str, views: usize) -> PathBuf {
    let dir = env.path(name);
    env.ok(&["generate", "--n-classes", "3", "--views", &views.to_string(), "--out", s(&dir)]);
    dir
}

fn class_dirs(root: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    v.sort();
    v
}

fn wavs_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn enroll_produces_one_prototype_per_keyword() {
    let env = Env::new();
    let ckpt = env.tiny_checkpoint("model.ckpt", 1);
    let supports = write_supports(&env, "supports", 5);
    let profile_path = env.path("out/profile.json");
    let stdout = env.ok(&["enroll", "--checkpoint", s(&ckpt), "--supports", s(&supports), "--out", s(&profile_path)]);
    assert!(stdout.contains("enrolled 3 keywords"));
    assert!(env.path("out/enroll.config.toml").is_file());

    let profile = EnrollmentProfile::load(&profile_path).unwrap();
    assert_eq!(profile.prototypes.len(), 3);
    assert_eq!(profile.checkpoint_sha256, file_sha256(&ckpt).unwrap());

    let cfg = RunConfig::from_toml_with_overrides(TINY, &[]).unwrap();
    let enc = Checkpoint::<f32>::load(&ckpt).unwrap().encoder;
    let ex = MfccExtractor::new(&DspConfig::default()).unwrap();
    let sets: Vec<_> = class_dirs(&supports)
        .iter()
        .map(|d| {
            let name = d.file_name().unwrap().to_str().unwrap().to_string();
            (name, wavs_in(d).iter().map(|p| fskws_core::dsp::read_wav(p).unwrap()).collect())
        })
        .collect();
    let direct = enroll(&enc, &ex, &sets, cfg.detection(), file_sha256(&ckpt).unwrap()).unwrap();
    assert_eq!(direct, profile);

    let first = class_dirs(&supports)[0].file_name().unwrap().to_str().unwrap().to_string();
    let out = env.run(&[
        "enroll",
        "--checkpoint",
        s(&ckpt),
        "--supports",
        s(&supports),
        "--keywords",
        &format!("{first},missing_kw"),
        "--out",
        s(&env.path("p2.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing_kw"));
}

#[test]
fn detect_reports_labels_unknowns_and_distances() {
    let env = Env::new();
    let ckpt = env.tiny_checkpoint("model.ckpt", 2);
    let supports = write_supports(&env, "one_shot", 1);
    let profile = env.path("profile.json");
    env.ok(&["enroll", "--checkpoint", s(&ckpt), "--supports", s(&supports), "--out", s(&profile)]);

    let dirs = class_dirs(&supports);
    let queries: Vec<PathBuf> = dirs.iter().map(|d| wavs_in(d)[0].clone()).collect();
    let mut args = vec!["detect", "--checkpoint", s(&ckpt), "--profile", s(&profile)];
    args.extend(queries.iter().map(|p| s(p)));

    let stdout = env.ok(&args);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 3);
    for ((line, q), d) in lines.iter().zip(&queries).zip(&dirs) {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f.len(), 3);
        assert_eq!(f[0], s(q));
        assert_eq!(f[1], d.file_name().unwrap().to_str().unwrap());
        assert_eq!(f[2], "0.000000");
    }

    let det_out = env.path("det/out.tsv");
    let mut strict = args.clone();
    strict.extend(["--d-th", "0", "--out", s(&det_out)]);
    std::fs::create_dir_all(env.path("det")).unwrap();
    let stdout = env.ok(&strict);
    assert!(stdout.lines().all(|l| l.split('\t').nth(1) == Some("unknown")));
    assert_eq!(String::from_utf8(read(env.path("det/out.tsv"))).unwrap(), stdout);
    assert!(env.path("det/detect.config.toml").is_file());

    let other = env.tiny_checkpoint("other.ckpt", 3);
    let mut wrong = vec!["detect", "--checkpoint", s(&other), "--profile", s(&profile)];
    wrong.push(s(&queries[0]));
    let out = env.run(&wrong);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different checkpoint"));
}

#[test]
fn evaluate_writes_table_and_records_reproducibly() {
    let env = Env::new();
    let run = env.path("eval_run");
    let mut c = Command::new(env!("CARGO_BIN_EXE_fskws"));
    let out = c.env("FSKWS_CONFIG", &env.config).args(["--output-dir", s(&run), "evaluate", "--untrained"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let eval = run.join("eval");
    let table = String::from_utf8(read(eval.join("report.txt"))).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].contains("Acc(target)") && rows[0].contains("AUROC"));
    for (row, k) in rows[1..].iter().zip([1, 5, 20]) {
        assert_eq!(row.split_whitespace().nth(1), Some(k.to_string().as_str()));
    }
    let records = String::from_utf8(read(eval.join("records.jsonl"))).unwrap();
    let values: Vec<serde_json::Value> = records.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(values.iter().filter(|v| v["record"] == "trial").count(), 6);
    assert_eq!(values.iter().filter(|v| v["record"] == "summary").count(), 3);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), table);

    let before = (read(eval.join("report.txt")), read(eval.join("records.jsonl")), read(eval.join("evaluate.config.toml")));
    env.ok(&["--output-dir", s(&run), "evaluate", "--untrained"]);
    let after = (read(eval.join("report.txt")), read(eval.join("records.jsonl")), read(eval.join("evaluate.config.toml")));
    assert_eq!(before, after);

    let out = env.run(&["--output-dir", s(&run), "--set", "eval.n_targets=4", "evaluate", "--untrained"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_and_export_on_a_directory_dataset() {
    let env = Env::new();
    let ckpt = env.tiny_checkpoint("model.ckpt", 4);
    let data = env.path("data");
    env.ok(&["generate", "--n-classes", "5", "--views", "4", "--out", s(&data)]);
    let layout = "dataset.layout={kind=\"mswc_like\", test_count=1}";

    let out_tsv = env.path("emb/all.tsv");
    let stdout = env.ok(&["--set", layout, "export-embeddings", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out", s(&out_tsv)]);
    assert!(stdout.contains("wrote 20 embeddings"));
    let recs = fskws_core::inference::read_embeddings(&out_tsv).unwrap();
    assert_eq!(recs.len(), 20);
    assert!(recs.iter().all(|r| r.values.len() == 32 && r.file_id.starts_with(&r.label)));

    let test_tsv = env.path("emb/test.tsv");
    env.ok(&[
        "--set",
        layout,
        "export-embeddings",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&data),
        "--partition",
        "test",
        "--out",
        s(&test_tsv),
    ]);
    assert_eq!(fskws_core::inference::read_embeddings(&test_tsv).unwrap().len(), 5);

    let run = env.path("ds_eval");
    env.ok(&[
        "--output-dir",
        s(&run),
        "--set",
        layout,
        "--set",
        "eval.k_shots=[1, 3]",
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&data),
    ]);
    let table = String::from_utf8(read(run.join("eval/report.txt"))).unwrap();
    assert_eq!(table.lines().count(), 3);
}
