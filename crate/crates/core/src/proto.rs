//! Prototypical-network mathematics: prototypes, posteriors over negative
//! distances, and the episodic cross-entropy loss with its gradient.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Euclidean,
    #[default]
    SquaredEuclidean,
}

impl Distance {
    pub fn eval(self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        let sq: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        match self {
            Distance::SquaredEuclidean => sq,
            Distance::Euclidean => sq.sqrt(),
        }
    }

    /// Gradient of the distance with respect to `a`; zero at coincidence for the euclidean case.
    fn grad_wrt_first(self, a: ArrayView1<f64>, b: ArrayView1<f64>, d: f64) -> ndarray::Array1<f64> {
        let diff = &a - &b;
        match self {
            Distance::SquaredEuclidean => diff * 2.0,
            Distance::Euclidean if d > 0.0 => diff / d,
            Distance::Euclidean => ndarray::Array1::zeros(a.len()),
        }
    }
}

/// Class prototypes with their identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Array2<f64>,
    pub class_ids: Vec<String>,
}

impl PrototypeSet {
    pub fn new(prototypes: Array2<f64>, class_ids: Vec<String>) -> Result<Self> {
        if prototypes.nrows() != class_ids.len() {
            return Err(Error::Shape(format!("{} prototypes but {} class ids", prototypes.nrows(), class_ids.len())));
        }
        if prototypes.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prototype".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = class_ids.iter().find(|c| !seen.insert(*c)) {
            return Err(Error::Degenerate(format!("duplicate class id {dup}")));
        }
        Ok(Self { prototypes, class_ids })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn distances(&self, query: ArrayView1<f64>, distance: Distance) -> Vec<f64> {
        self.prototypes.rows().into_iter().map(|c| distance.eval(query, c)).collect()
    }
}

/// Mean of each class's supports. `embeddings` is `[N, K, D]`.
pub fn compute_prototypes(embeddings: ArrayView3<f64>) -> Result<Array2<f64>> {
    let (_, k, _) = embeddings.dim();
    if k == 0 {
        return Err(Error::Degenerate("empty support set".into()));
    }
    Ok(embeddings.mean_axis(Axis(1)).expect("k > 0"))
}

/// Softmax over negative distances, computed with max-subtraction.
pub fn posteriors_from_distances(distances: &[f64]) -> Result<Vec<f64>> {
    if distances.is_empty() {
        return Err(Error::Degenerate("no classes".into()));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("distance".into()));
    }
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = distances.iter().map(|d| (min - d).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn class_posteriors(query: ArrayView1<f64>, protos: &PrototypeSet, distance: Distance) -> Result<Vec<f64>> {
    posteriors_from_distances(&protos.distances(query, distance))
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Episodic loss and its gradient with respect to every embedding.
#[derive(Clone, Debug)]
pub struct EpisodeLoss {
    pub loss: f64,
    /// Same layout as the input embeddings.
    pub grad: Array2<f64>,
    /// Fraction of queries whose nearest prototype is their own class.
    pub accuracy: f64,
}

/// Cross-entropy of each query against the prototypes of its episode.
///
/// `embeddings` holds `n_way * (k_shots + 1)` rows, class-major: rows
/// `n*(K+1) .. n*(K+1)+K` are class `n`'s supports and row `n*(K+1)+K` its query.
/// Supports receive gradient through the prototype mean.
pub fn episode_loss(embeddings: ArrayView2<f64>, n_way: usize, k_shots: usize, distance: Distance) -> Result<EpisodeLoss> {
    if n_way < 2 {
        return Err(Error::Degenerate(format!("an episode needs at least 2 classes, got {n_way}")));
    }
    if k_shots == 0 {
        return Err(Error::Degenerate("empty support set".into()));
    }
    let per = k_shots + 1;
    if embeddings.nrows() != n_way * per {
        return Err(Error::Shape(format!("{} embeddings for a {n_way}-way {k_shots}-shot episode", embeddings.nrows())));
    }
    let dim = embeddings.ncols();
    let grouped = embeddings.into_shape_with_order((n_way, per, dim)).map_err(|e| Error::Shape(e.to_string()))?;
    let supports = grouped.slice(ndarray::s![.., ..k_shots, ..]);
    let protos = compute_prototypes(supports)?;

    let mut grad = Array2::<f64>::zeros((n_way * per, dim));
    let mut grad_protos = Array2::<f64>::zeros((n_way, dim));
    let mut loss = 0.0;
    let mut correct = 0;
    let inv_n = 1.0 / n_way as f64;
    for i in 0..n_way {
        let q = grouped.slice(ndarray::s![i, k_shots, ..]);
        let d: Vec<f64> = protos.rows().into_iter().map(|c| distance.eval(q, c)).collect();
        let p = posteriors_from_distances(&d)?;
        // -log p_i = d_i + log sum exp(-d), computed stably.
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        let lse = -min + d.iter().map(|dj| (min - dj).exp()).sum::<f64>().ln();
        loss += d[i] + lse;
        if argmin(&d) == Some(i) {
            correct += 1;
        }
        for (j, c) in protos.rows().into_iter().enumerate() {
            // dL/dd_ij = ([i == j] - p_ij) / N
            let a = (if i == j { 1.0 } else { 0.0 } - p[j]) * inv_n;
            if a == 0.0 {
                continue;
            }
            let g = distance.grad_wrt_first(q, c, d[j]);
            grad.row_mut(i * per + k_shots).scaled_add(a, &g);
            grad_protos.row_mut(j).scaled_add(-a, &g);
        }
    }
    let inv_k = 1.0 / k_shots as f64;
    for n in 0..n_way {
        for k in 0..k_shots {
            grad.row_mut(n * per + k).scaled_add(inv_k, &grad_protos.row(n));
        }
    }
    Ok(EpisodeLoss { loss: loss * inv_n, grad, accuracy: correct as f64 * inv_n })
}
