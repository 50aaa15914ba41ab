use fskws_core::proto::{
    argmax, argmin, class_posteriors, compute_prototypes, episode_loss, posteriors_from_distances, Distance, PrototypeSet,
};
use fskws_core::rng;
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::item(seed);
    Array2::from_shape_simple_fn((rows, cols), || r.gen_range(-2.0..2.0))
}

/// Straight-line reference: prototypes, distances, log-softmax, mean.
fn reference_loss(e: &Array2<f64>, n: usize, k: usize, d: Distance) -> f64 {
    let dim = e.ncols();
    let mut protos = vec![vec![0.0; dim]; n];
    for c in 0..n {
        for s in 0..k {
            for j in 0..dim {
                protos[c][j] += e[[c * (k + 1) + s, j]] / k as f64;
            }
        }
    }
    let mut total = 0.0;
    for c in 0..n {
        let q = e.row(c * (k + 1) + k);
        let dist: Vec<f64> = protos
            .iter()
            .map(|p| {
                let sq: f64 = p.iter().zip(q.iter()).map(|(a, b)| (a - b).powi(2)).sum();
                if d == Distance::Euclidean {
                    sq.sqrt()
                } else {
                    sq
                }
            })
            .collect();
        let z: f64 = dist.iter().map(|x| (-x).exp()).sum();
        total += dist[c] + z.ln();
    }
    total / n as f64
}

fn fd_check(distance: Distance, seed: u64) {
    let (n, k) = (4, 3);
    let e = random(n * (k + 1), 2, seed);
    let out = episode_loss(e.view(), n, k, distance).unwrap();
    assert!((out.loss - reference_loss(&e, n, k, distance)).abs() <= 1e-12);
    let h = 1e-5;
    for i in 0..e.nrows() {
        for j in 0..2 {
            let mut p = e.clone();
            p[[i, j]] += h;
            let mut m = e.clone();
            m[[i, j]] -= h;
            let num = (reference_loss(&p, n, k, distance) - reference_loss(&m, n, k, distance)) / (2.0 * h);
            let a = out.grad[[i, j]];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            assert!(rel <= 1e-6, "{distance:?} [{i},{j}] analytic {a} numeric {num}");
        }
    }
}

#[test]
fn squared_euclidean_gradients_match_finite_differences() {
    for seed in 0..5 {
        fd_check(Distance::SquaredEuclidean, seed);
    }
}

#[test]
fn euclidean_gradients_match_finite_differences() {
    for seed in 10..15 {
        fd_check(Distance::Euclidean, seed);
    }
}

#[test]
fn prototypes_match_direct_summation() {
    let flat = random(5 * 7, 192, 20);
    let e = Array3::from_shape_vec((5, 7, 192), flat.iter().copied().collect()).unwrap();
    let p = compute_prototypes(e.view()).unwrap();
    for c in 0..5 {
        for j in 0..192 {
            let mut s = 0.0;
            for k in 0..7 {
                s += e[[c, k, j]];
            }
            assert!((p[[c, j]] - s / 7.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn equidistant_queries_give_log_n() {
    // Prototypes on the vertices of a regular simplex, queries at the centroid.
    let (n, k) = (3, 2);
    let verts = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut e = Array2::zeros((n * (k + 1), 3));
    for (c, v) in verts.iter().enumerate() {
        for s in 0..k {
            e.row_mut(c * (k + 1) + s).assign(&ndarray::arr1(v));
        }
        e.row_mut(c * (k + 1) + k).fill(1.0 / 3.0);
    }
    for d in [Distance::SquaredEuclidean, Distance::Euclidean] {
        let l = episode_loss(e.view(), n, k, d).unwrap();
        assert!((l.loss - 3f64.ln()).abs() <= 1e-9);
    }
}

#[test]
fn saturated_episode_far_apart() {
    let (n, k) = (3, 2);
    let mut e = Array2::zeros((n * (k + 1), 2));
    for c in 0..n {
        for r in 0..=k {
            e[[c * (k + 1) + r, 0]] = 10.0 * c as f64;
        }
    }
    let l = episode_loss(e.view(), n, k, Distance::SquaredEuclidean).unwrap();
    assert!(l.loss <= 1e-12 && l.loss >= 0.0);
}

#[test]
fn class_permutation_leaves_loss_unchanged() {
    let (n, k) = (5, 2);
    let e = random(n * (k + 1), 6, 30);
    let perm = [3, 0, 4, 1, 2];
    let mut p = e.clone();
    for (dst, &src) in perm.iter().enumerate() {
        for r in 0..=k {
            p.row_mut(dst * (k + 1) + r).assign(&e.row(src * (k + 1) + r));
        }
    }
    let a = episode_loss(e.view(), n, k, Distance::SquaredEuclidean).unwrap();
    let b = episode_loss(p.view(), n, k, Distance::SquaredEuclidean).unwrap();
    assert!((a.loss - b.loss).abs() <= 1e-12);
    for (dst, &src) in perm.iter().enumerate() {
        for r in 0..=k {
            let diff = &a.grad.row(src * (k + 1) + r) - &b.grad.row(dst * (k + 1) + r);
            assert!(diff.iter().all(|v| v.abs() <= 1e-12));
        }
    }
}

#[test]
fn posteriors_follow_prototype_permutation() {
    let protos = random(4, 8, 40);
    let q = random(1, 8, 41);
    let set = PrototypeSet::new(protos.clone(), (0..4).map(|i| i.to_string()).collect()).unwrap();
    let p = class_posteriors(q.row(0), &set, Distance::SquaredEuclidean).unwrap();
    let perm = [2, 0, 3, 1];
    let mut pp = protos.clone();
    for (dst, &src) in perm.iter().enumerate() {
        pp.row_mut(dst).assign(&protos.row(src));
    }
    let set2 = PrototypeSet::new(pp, (0..4).map(|i| i.to_string()).collect()).unwrap();
    let p2 = class_posteriors(q.row(0), &set2, Distance::SquaredEuclidean).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        assert!((p2[dst] - p[src]).abs() <= 1e-12);
    }
}

#[test]
fn duplicate_class_ids_rejected() {
    assert!(PrototypeSet::new(Array2::zeros((2, 3)), vec!["a".into(), "a".into()]).is_err());
    assert!(PrototypeSet::new(Array2::zeros((2, 3)), vec!["a".into()]).is_err());
}

proptest! {
    #[test]
    fn posteriors_normalize_and_agree_with_argmin(d in prop::collection::vec(0.0f64..50.0, 1..20), shift in -100.0f64..100.0) {
        let p = posteriors_from_distances(&d).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert_eq!(argmax(&p), argmin(&d));
        let shifted: Vec<f64> = d.iter().map(|x| x + shift).collect();
        let q = posteriors_from_distances(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn ties_agree_between_argmax_and_argmin(v in 0.0f64..5.0, n in 2usize..8, other in 5.5f64..9.0) {
        let mut d = vec![other; n];
        d[n - 1] = v;
        d[0] = v;
        let p = posteriors_from_distances(&d).unwrap();
        prop_assert_eq!(argmin(&d), Some(0));
        prop_assert_eq!(argmax(&p), Some(0));
    }
}
