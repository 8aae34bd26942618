use std::f64::consts::PI;

use csgm::manifold::{
    dmaps, gh_fit, kernel_matrix, markov_matrix, median_epsilon, select_nonharmonic,
    DmapEmbedding, GhInterpolant,
};
use csgm::sde::chain_rng;
use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn circle(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = chain_rng(seed, 0);
    let mut x = Array2::zeros((n, 2));
    for mut row in x.rows_mut() {
        let th = rng.random_range(0.0..2.0 * PI);
        row[0] = th.cos();
        row[1] = th.sin();
    }
    x
}

#[test]
fn circle_embeds_as_circle() {
    let x = circle(500, 1);
    let eps = median_epsilon(x.view(), 0.1).unwrap();
    let emb = dmaps(x.view(), eps, 4).unwrap();
    let r: Vec<f64> = (0..500)
        .map(|i| emb.eigenvectors[[i, 1]].hypot(emb.eigenvectors[[i, 2]]))
        .collect();
    let mean = r.iter().sum::<f64>() / 500.0;
    let sd = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 500.0).sqrt();
    assert!(sd / mean < 0.1, "coefficient of variation {}", sd / mean);
}

#[test]
fn arc_first_coordinate_is_monotone() {
    let n = 200;
    let th: Vec<f64> = (0..n).map(|i| 0.5 * PI * i as f64 / (n - 1) as f64).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut chain_rng(2, 0));
    let x = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { th[order[i]].cos() } else { th[order[i]].sin() });
    let emb = dmaps(x.view(), median_epsilon(x.view(), 0.2).unwrap(), 2).unwrap();
    let mut pairs: Vec<(f64, f64)> = (0..n).map(|i| (th[order[i]], emb.eigenvectors[[i, 1]])).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let inc = pairs.windows(2).all(|w| w[1].1 > w[0].1);
    let dec = pairs.windows(2).all(|w| w[1].1 < w[0].1);
    assert!(inc || dec);
}

#[test]
fn markov_rows_sum_to_one_and_kernel_is_symmetric() {
    let x = circle(120, 3).mapv(|v| v * 1.7) + 0.2;
    let eps = median_epsilon(x.view(), 1.0).unwrap();
    let a = kernel_matrix(x.view(), eps);
    assert_eq!(a, a.t());
    let w = markov_matrix(x.view(), eps);
    for row in w.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn rectangle_selects_two_coordinates() {
    // A 2.5 × 1 strip has Neumann modes cos(kπx/2.5)·cos(lπy); by eigenvalue the
    // order is (1,0), (2,0), (0,1), (1,1), (3,0). Only (1,0) and (0,1) are new
    // directions, the rest are functions of those two.
    let mut rng = chain_rng(4, 0);
    let x = Array2::from_shape_fn((800, 2), |(_, j)| if j == 0 { rng.random_range(0.0..2.5) } else { rng.random_range(0.0..1.0) });
    let mut emb = dmaps(x.view(), median_epsilon(x.view(), 0.05).unwrap(), 5).unwrap();
    let sel = select_nonharmonic(&mut emb, 0.5).unwrap();
    assert_eq!(sel.len(), 2, "selected {sel:?}, residuals {:?}", emb.residuals);
    assert_eq!(sel, vec![1, 3]);
    // The short-side coordinate correlates with y, not x.
    let y = x.column(1);
    let phi = emb.eigenvectors.column(sel[1]);
    let corr = pearson(y.to_owned(), phi.to_owned());
    assert!(corr.abs() > 0.9, "corr {corr}");
}

fn pearson(a: Array1<f64>, b: Array1<f64>) -> f64 {
    let a = &a - a.mean().unwrap();
    let b = &b - b.mean().unwrap();
    a.dot(&b) / (a.dot(&a) * b.dot(&b)).sqrt()
}

#[test]
fn gh_reproduces_training_values_with_full_spectrum() {
    let mut rng = chain_rng(5, 0);
    let x = Array2::from_shape_fn((60, 2), |_| rng.random_range(-1.0..1.0));
    let f = Array2::from_shape_fn((60, 2), |(i, j)| (x[[i, 0]] * (j + 1) as f64).sin() + x[[i, 1]].powi(2));
    let gh = gh_fit(x.view(), f.view(), 0.01, 1e-12).unwrap();
    assert_eq!(gh.sigma.len(), 60);
    let back = gh.extend_batch(x.view()).unwrap();
    for (g, w) in back.iter().zip(f.iter()) {
        assert!((g - w).abs() <= 1e-6 * w.abs().max(1.0), "{g} vs {w}");
    }
}

#[test]
fn gh_extends_constants() {
    let n = 25;
    let x = Array2::from_shape_fn((n * n, 2), |(i, j)| if j == 0 { (i % n) as f64 / (n - 1) as f64 } else { (i / n) as f64 / (n - 1) as f64 });
    let f = Array2::from_elem((n * n, 1), 3.5);
    // Reproducing constants to 1e-6 needs a wide kernel and nearly the whole spectrum.
    let gh = gh_fit(x.view(), f.view(), 0.05, 1e-14).unwrap();
    let mut rng = chain_rng(6, 0);
    for _ in 0..50 {
        let p = Array1::from(vec![rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]);
        let v = gh.extend(p.view()).unwrap()[0];
        assert!((v - 3.5).abs() < 1e-6, "{v}");
    }
}

#[test]
fn gh_spectrum_respects_truncation() {
    let x = circle(150, 7);
    let f = x.column(0).to_owned().insert_axis(Axis(1));
    let delta = 1e-3;
    let gh = gh_fit(x.view(), f.view(), 0.05, delta).unwrap();
    assert!(gh.sigma.windows(2).all(|w| w[0] >= w[1]));
    assert!(gh.sigma.iter().all(|s| *s > delta * gh.sigma[0]));
    assert!(gh.sigma.len() < 150);
}

#[test]
fn models_round_trip_through_files() {
    let x = circle(80, 8);
    let dir = tempfile::tempdir().unwrap();
    let mut emb = dmaps(x.view(), 0.1, 4).unwrap();
    select_nonharmonic(&mut emb, 0.5).unwrap();
    emb.save(dir.path().join("dmap.json")).unwrap();
    assert_eq!(DmapEmbedding::load(dir.path().join("dmap.json")).unwrap(), emb);
    let gh = gh_fit(x.view(), x.view(), 0.1, 1e-3).unwrap();
    gh.save(dir.path().join("gh.json")).unwrap();
    assert_eq!(GhInterpolant::load(dir.path().join("gh.json")).unwrap(), gh);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gh_is_linear_in_targets(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..100) {
        let mut rng = chain_rng(seed, 0);
        let x: Array2<f64> = Array2::from_shape_fn((40, 2), |_| rng.random_range(-1.0..1.0));
        let f = Array2::from_shape_fn((40, 1), |(i, _)| x[[i, 0]].exp());
        let g = Array2::from_shape_fn((40, 1), |(i, _)| x[[i, 1]].sin());
        let combo = &f * a + &g * b;
        let eps = 0.3;
        let probe = Array2::from_shape_fn((10, 2), |_| rng.random_range(-1.0..1.0));
        let ef = gh_fit(x.view(), f.view(), eps, 1e-3).unwrap().extend_batch(probe.view()).unwrap();
        let eg = gh_fit(x.view(), g.view(), eps, 1e-3).unwrap().extend_batch(probe.view()).unwrap();
        let ec = gh_fit(x.view(), combo.view(), eps, 1e-3).unwrap().extend_batch(probe.view()).unwrap();
        let want = &ef * a + &eg * b;
        for (c, w) in ec.iter().zip(want.iter()) {
            prop_assert!((c - w).abs() < 1e-10 * w.abs().max(1.0));
        }
    }

    #[test]
    fn dmaps_is_permutation_invariant(seed in 0u64..100) {
        let x = circle(60, seed);
        let mut perm: Vec<usize> = (0..60).collect();
        perm.shuffle(&mut chain_rng(seed, 1));
        let xp = x.select(Axis(0), &perm);
        let e1 = dmaps(x.view(), 0.2, 3).unwrap();
        let e2 = dmaps(xp.view(), 0.2, 3).unwrap();
        for k in 0..4 {
            prop_assert!((e1.eigenvalues[k] - e2.eigenvalues[k]).abs() < 1e-10);
        }
        // φ₁ (simple eigenvalue up to sampling asymmetry) permutes with the rows.
        if (e1.eigenvalues[1] - e1.eigenvalues[2]).abs() > 1e-6 {
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((e2.eigenvectors[[i, 1]] - e1.eigenvectors[[p, 1]]).abs() < 1e-6);
            }
        }
    }
}
