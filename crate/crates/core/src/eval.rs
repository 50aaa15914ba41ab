//! Open-set evaluation: repeated trials of target enrollment plus unknown
//! rejection, scored by Acc(target), Acc(total) at the EER threshold and AUROC.

use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::decide;
use crate::proto::{Distance, PrototypeSet};
use crate::rng;

fn require_scores(unknown: &[f64], known: &[f64]) -> Result<()> {
    if unknown.is_empty() || known.is_empty() {
        return Err(Error::Degenerate("both score lists must be non-empty".into()));
    }
    if unknown.iter().chain(known).any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score".into()));
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    s
}

/// Number of elements of sorted `s` below `x` and equal to `x`.
fn below_and_equal(s: &[f64], x: f64) -> (usize, usize) {
    let lo = s.partition_point(|v| *v < x);
    let hi = s.partition_point(|v| *v <= x);
    (lo, hi - lo)
}

/// Probability that an unknown scores above a known, ties counting one half.
///
/// Computed as `(2 * wins + ties) / (2 * |U| * |K|)` from exact integer counts.
pub fn auroc(unknown: &[f64], known: &[f64]) -> Result<f64> {
    require_scores(unknown, known)?;
    let k = sorted(known);
    let (mut wins, mut ties) = (0u128, 0u128);
    for &u in unknown {
        let (below, equal) = below_and_equal(&k, u);
        wins += below as u128;
        ties += equal as u128;
    }
    Ok((2 * wins + ties) as f64 / (2 * unknown.len() as u128 * known.len() as u128) as f64)
}

/// Operating point where false accepts of unknowns balance false rejects of knowns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    /// Accept iff score < threshold.
    pub threshold: f64,
    pub eer: f64,
    pub fpr: f64,
    pub fnr: f64,
}

/// Sweep every distinct score as a threshold; the smallest threshold minimizing |FPR - FNR| wins.
pub fn eer_threshold(unknown: &[f64], known: &[f64]) -> Result<EerPoint> {
    require_scores(unknown, known)?;
    let (u, k) = (sorted(unknown), sorted(known));
    let mut cands: Vec<f64> = u.iter().chain(&k).copied().collect();
    cands.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    cands.dedup();
    let (nu, nk) = (u.len() as f64, k.len() as f64);
    let mut best: Option<(f64, EerPoint)> = None;
    for t in cands {
        let fpr = u.partition_point(|v| *v < t) as f64 / nu;
        let fnr = (k.len() - k.partition_point(|v| *v < t)) as f64 / nk;
        let gap = (fpr - fnr).abs();
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, EerPoint { threshold: t, eer: 0.5 * (fpr + fnr), fpr, fnr }));
        }
    }
    Ok(best.expect("non-empty").1)
}

/// Embeddings of an evaluation dataset, grouped by keyword.
#[derive(Clone, Debug)]
pub struct EvalCorpus {
    pub keywords: Vec<String>,
    /// Per keyword, `[n_support, dim]` embeddings enrollment draws from.
    pub support: Vec<Array2<f64>>,
    /// Per keyword, `[n_test, dim]` query embeddings.
    pub test: Vec<Array2<f64>>,
}

impl EvalCorpus {
    pub fn new(keywords: Vec<String>, support: Vec<Array2<f64>>, test: Vec<Array2<f64>>) -> Result<Self> {
        if keywords.len() != support.len() || keywords.len() != test.len() {
            return Err(Error::Shape("keyword, support and test lists differ in length".into()));
        }
        let dim = support.first().map_or(0, |s| s.ncols());
        if support.iter().chain(&test).any(|m| m.ncols() != dim) {
            return Err(Error::Shape("embedding sizes differ across keywords".into()));
        }
        if test.iter().any(|t| t.nrows() == 0) {
            return Err(Error::Degenerate("every keyword needs at least one test clip".into()));
        }
        Ok(Self { keywords, support, test })
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    pub fn min_support(&self) -> usize {
        self.support.iter().map(|s| s.nrows()).min().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ThresholdMode {
    /// Threshold at the EER of the very queries being scored.
    #[default]
    TestEer,
    /// Threshold at the EER of a random half of the queries; Acc(total) on the other half.
    HeldOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialSpec {
    pub n_targets: usize,
    pub n_unknown: usize,
    pub k_shots: Vec<usize>,
    pub n_trials: usize,
    pub seed: u64,
    pub distance: Distance,
    pub threshold: ThresholdMode,
}

impl Default for TrialSpec {
    fn default() -> Self {
        Self {
            n_targets: 10,
            n_unknown: 20,
            k_shots: vec![1, 5, 20],
            n_trials: 100,
            seed: 0,
            distance: Distance::SquaredEuclidean,
            threshold: ThresholdMode::TestEer,
        }
    }
}

impl TrialSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_targets == 0 || self.n_unknown == 0 {
            return Err(Error::Config("need at least one target and one unknown keyword".into()));
        }
        if self.k_shots.is_empty() || self.k_shots.contains(&0) {
            return Err(Error::Config("k_shots must be a non-empty list of positive counts".into()));
        }
        if self.n_trials < 2 {
            return Err(Error::Config("need at least 2 trials for a confidence interval".into()));
        }
        Ok(())
    }

    pub fn check_corpus(&self, corpus: &EvalCorpus) -> Result<()> {
        self.validate()?;
        if self.n_targets + self.n_unknown > corpus.len() {
            return Err(Error::Config(format!(
                "{} targets + {} unknown keywords but the dataset has {}",
                self.n_targets,
                self.n_unknown,
                corpus.len()
            )));
        }
        let k = *self.k_shots.iter().max().expect("validated");
        if k > corpus.min_support() {
            return Err(Error::Config(format!("{k} shots but the smallest support pool has {}", corpus.min_support())));
        }
        Ok(())
    }
}

/// Metrics of one trial, as fractions in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub k_shots: usize,
    pub acc_target: f64,
    pub acc_total: f64,
    pub auroc: f64,
    pub d_th: f64,
    pub eer: f64,
    pub targets: Vec<String>,
}

/// One query scored against the trial's prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredQuery {
    /// Target index, or `None` for an unknown keyword.
    pub truth: Option<usize>,
    pub candidate: usize,
    /// Distance to the candidate prototype; larger means more likely unknown.
    pub distance: f64,
}

/// Every test query of one trial, scored once.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialScores {
    pub targets: Vec<String>,
    pub queries: Vec<ScoredQuery>,
}

fn split_scores(qs: &[&ScoredQuery]) -> (Vec<f64>, Vec<f64>) {
    (
        qs.iter().filter(|q| q.truth.is_none()).map(|q| q.distance).collect(),
        qs.iter().filter(|q| q.truth.is_some()).map(|q| q.distance).collect(),
    )
}

fn accuracy_at(qs: &[&ScoredQuery], d_th: f64) -> f64 {
    let correct = qs
        .iter()
        .filter(|q| match (q.truth, q.distance < d_th) {
            (Some(t), true) => q.candidate == t,
            (None, false) => true,
            _ => false,
        })
        .count();
    correct as f64 / qs.len() as f64
}

impl TrialScores {
    fn all(&self) -> Vec<&ScoredQuery> {
        self.queries.iter().collect()
    }

    /// Candidate accuracy over target queries, without a threshold.
    pub fn acc_target(&self) -> f64 {
        let known: Vec<_> = self.queries.iter().filter(|q| q.truth.is_some()).collect();
        known.iter().filter(|q| q.truth == Some(q.candidate)).count() as f64 / known.len() as f64
    }

    /// Accuracy over all queries with unknown as an extra class.
    pub fn acc_total(&self, d_th: f64) -> f64 {
        accuracy_at(&self.all(), d_th)
    }

    /// Unknown-query and target-query scores.
    pub fn binary_scores(&self) -> (Vec<f64>, Vec<f64>) {
        split_scores(&self.all())
    }

    pub fn auroc(&self) -> Result<f64> {
        let (u, k) = self.binary_scores();
        auroc(&u, &k)
    }
}

/// Sample targets and unknowns, enroll `k` supports per target and score every test clip of the sampled keywords.
pub fn score_trial(corpus: &EvalCorpus, spec: &TrialSpec, k: usize, rng: &mut dyn rand::RngCore) -> Result<TrialScores> {
    let picked = index::sample(rng, corpus.len(), spec.n_targets + spec.n_unknown).into_vec();
    let (targets, unknown) = picked.split_at(spec.n_targets);

    let dim = corpus.support[0].ncols();
    let mut protos = Array2::zeros((targets.len(), dim));
    for (i, &kw) in targets.iter().enumerate() {
        let pool = &corpus.support[kw];
        if k > pool.nrows() {
            return Err(Error::Config(format!("keyword {} has {} supports, need {k}", corpus.keywords[kw], pool.nrows())));
        }
        let rows = index::sample(rng, pool.nrows(), k).into_vec();
        protos.row_mut(i).assign(&pool.select(Axis(0), &rows).mean_axis(Axis(0)).expect("k > 0"));
    }
    let names: Vec<String> = targets.iter().map(|&t| corpus.keywords[t].clone()).collect();
    let set = PrototypeSet::new(protos, names.clone())?;

    let mut queries = Vec::new();
    let labelled = targets.iter().enumerate().map(|(i, &kw)| (Some(i), kw)).chain(unknown.iter().map(|&kw| (None, kw)));
    for (truth, kw) in labelled {
        for q in corpus.test[kw].rows() {
            let det = decide(set.distances(q, spec.distance), f64::MAX)?;
            queries.push(ScoredQuery { truth, candidate: det.candidate, distance: det.distance });
        }
    }
    Ok(TrialScores { targets: names, queries })
}

/// One full trial seeded with `seed ^ trial`.
pub fn run_trial(corpus: &EvalCorpus, spec: &TrialSpec, k: usize, trial: usize) -> Result<TrialRecord> {
    let mut r = rng::item(spec.seed ^ trial as u64);
    let scores = score_trial(corpus, spec, k, &mut r)?;
    let auroc = scores.auroc()?;
    let all = scores.all();
    let (point, acc_total) = match spec.threshold {
        ThresholdMode::TestEer => {
            let (u, kn) = split_scores(&all);
            let p = eer_threshold(&u, &kn)?;
            (p, accuracy_at(&all, p.threshold))
        }
        ThresholdMode::HeldOut => {
            let mut order = all.clone();
            order.shuffle(&mut r);
            let (calib, rest) = order.split_at(order.len() / 2);
            let (u, kn) = split_scores(calib);
            let p = eer_threshold(&u, &kn)?;
            (p, accuracy_at(rest, p.threshold))
        }
    };
    Ok(TrialRecord {
        trial,
        k_shots: k,
        acc_target: scores.acc_target(),
        acc_total,
        auroc,
        d_th: point.threshold,
        eer: point.eer,
        targets: scores.targets,
    })
}

/// Mean and 95% normal-approximation half-width, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub ci95: f64,
}

impl MetricSummary {
    pub fn from_fractions(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::Degenerate(format!("need at least 2 trials, got {n}")));
        }
        let pct: Vec<f64> = values.iter().map(|v| v * 100.0).collect();
        let mean = pct.iter().sum::<f64>() / n as f64;
        let var = pct.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Ok(Self { mean, ci95: 1.96 * var.sqrt() / (n as f64).sqrt() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k_shots: usize,
    pub n_trials: usize,
    pub acc_target: MetricSummary,
    pub acc_total: MetricSummary,
    pub auroc: MetricSummary,
    pub trials: Vec<TrialRecord>,
}

pub fn aggregate(trials: Vec<TrialRecord>) -> Result<EvalReport> {
    let k_shots = trials.first().map_or(0, |t| t.k_shots);
    if trials.iter().any(|t| t.k_shots != k_shots) {
        return Err(Error::Degenerate("trials with different shot counts cannot be aggregated".into()));
    }
    let col = |f: fn(&TrialRecord) -> f64| trials.iter().map(f).collect::<Vec<_>>();
    Ok(EvalReport {
        k_shots,
        n_trials: trials.len(),
        acc_target: MetricSummary::from_fractions(&col(|t| t.acc_target))?,
        acc_total: MetricSummary::from_fractions(&col(|t| t.acc_total))?,
        auroc: MetricSummary::from_fractions(&col(|t| t.auroc))?,
        trials,
    })
}

/// All trials for every shot count; trials run in parallel and are returned in order.
pub fn evaluate(corpus: &EvalCorpus, spec: &TrialSpec) -> Result<Vec<EvalReport>> {
    spec.check_corpus(corpus)?;
    spec.k_shots
        .iter()
        .map(|&k| {
            let trials = (0..spec.n_trials).into_par_iter().map(|t| run_trial(corpus, spec, k, t)).collect::<Result<Vec<_>>>()?;
            aggregate(trials)
        })
        .collect()
}

/// Table with one row per method and shot count.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let width = rows.iter().map(|(m, _)| m.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:width$}  {:>3}  {:>15}  {:>15}  {:>15}", "Method", "K", "Acc(target)", "Acc(total)", "AUROC");
    for (method, r) in rows {
        let cell = |m: &MetricSummary| format!("{:.2} ± {:.2}", m.mean, m.ci95);
        let _ = writeln!(
            out,
            "{method:width$}  {:>3}  {:>15}  {:>15}  {:>15}",
            r.k_shots,
            cell(&r.acc_target),
            cell(&r.acc_total),
            cell(&r.auroc)
        );
    }
    out
}

/// One JSON object per trial followed by one summary object per report.
pub fn format_records(rows: &[(String, EvalReport)]) -> Result<String> {
    let mut out = String::new();
    for (method, r) in rows {
        for t in &r.trials {
            let mut v = serde_json::to_value(t)?;
            v["record"] = "trial".into();
            v["method"] = method.clone().into();
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
    }
    for (method, r) in rows {
        let v = serde_json::json!({
            "record": "summary",
            "method": method,
            "k_shots": r.k_shots,
            "n_trials": r.n_trials,
            "acc_target": r.acc_target,
            "acc_total": r.acc_total,
            "auroc": r.auroc,
        });
        out.push_str(&serde_json::to_string(&v)?);
        out.push('\n');
    }
    Ok(out)
}
