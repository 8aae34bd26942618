use csgm::data::names;
use csgm::score_mcs::{fit_surrogate, mcs_score, BatchMode, EmpiricalScore, McsConfig, SurrogateConfig, SurrogateMap};
use csgm::sde::{
    chain_rng, sample_chains_traced, standard_normal_vec, ChainState, Integrator, NoiseSchedule,
    Schedule, ScoreModel, SdeConfig,
};
use csgm::SampleSet;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;

fn gaussian_data(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = chain_rng(seed, 0);
    let mut x = Array2::zeros((n, dim));
    for mut row in x.rows_mut() {
        row.assign(&standard_normal_vec(&mut rng, dim));
    }
    x
}

/// Gradient of log (1/N) Σ N(x; α xⱼ, β² I), written out with plain exponentials.
fn mixture_score_oracle(x: &Array1<f64>, t: f64, data: &Array2<f64>) -> Array1<f64> {
    let s = NoiseSchedule::Linear;
    let (a, b2) = (s.alpha(t), s.beta2(t));
    let mut num = Array1::<f64>::zeros(x.len());
    let mut den = 0.0;
    for row in data.rows() {
        let diff = x - &row.mapv(|v| a * v);
        let dens = (-diff.dot(&diff) / (2.0 * b2)).exp();
        den += dens;
        num.scaled_add(-dens / b2, &diff);
    }
    num / den
}

fn rel_err(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let d = a - b;
    d.dot(&d).sqrt() / b.dot(b).sqrt().max(1e-300)
}

#[test]
fn full_batch_matches_mixture_oracle() {
    let data = gaussian_data(300, 2, 11);
    let mut rng = chain_rng(12, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = rng.random_range(0.05..0.999);
        let x = standard_normal_vec(&mut rng, 2);
        let got = mcs_score(x.view(), t, data.view(), None, &NoiseSchedule::Linear).unwrap();
        worst = worst.max(rel_err(&got, &mixture_score_oracle(&x, t, &data)));
    }
    assert!(worst < 1e-10, "worst relative error {worst:e}");
}

#[test]
fn minibatch_error_shrinks_with_batch_size() {
    let data = gaussian_data(4000, 2, 21);
    let set = SampleSet::new(data.clone(), names(&["a", "b"])).unwrap();
    let mut probe_rng = chain_rng(22, 0);
    let probes: Vec<(Array1<f64>, f64)> = (0..100)
        .map(|_| {
            let t = probe_rng.random_range(0.2..0.9);
            (standard_normal_vec(&mut probe_rng, 2), t)
        })
        .collect();
    let mut medians = Vec::new();
    for n_m in [16, 64, 256] {
        let src = EmpiricalScore::new(set.clone(), McsConfig { minibatch: n_m, ..Default::default() }).unwrap();
        let model = src.condition(None).unwrap();
        let mut errs: Vec<f64> = probes
            .iter()
            .enumerate()
            .map(|(i, (x, t))| {
                let mut chain = ChainState::new(23, i as u64);
                let est = model.score(x.view(), *t, None, &mut chain).unwrap();
                let full = mcs_score(x.view(), *t, data.view(), None, &NoiseSchedule::Linear).unwrap();
                rel_err(&est, &full)
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        medians.push(errs[errs.len() / 2]);
    }
    assert!(medians[0] > medians[1] && medians[1] > medians[2], "medians {medians:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn translation_equivariance(c in -5.0f64..5.0, t in 1e-3f64..0.99, seed in 0u64..1000) {
        let data = gaussian_data(20, 2, seed);
        let mut rng = chain_rng(seed, 1);
        let x = standard_normal_vec(&mut rng, 2);
        let s = NoiseSchedule::Linear;
        let a = s.alpha(t);
        let base = mcs_score(x.view(), t, data.view(), None, &s).unwrap();
        let shifted_data = data.mapv(|v| v + c);
        let shifted_x = x.mapv(|v| v + a * c);
        let moved = mcs_score(shifted_x.view(), t, shifted_data.view(), None, &s).unwrap();
        let scale = base.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for k in 0..2 {
            prop_assert!((base[k] - moved[k]).abs() <= 1e-8 * scale, "{} vs {}", base[k], moved[k]);
        }
    }
}

fn labelled_line(n: usize) -> SampleSet {
    // x = 2y + small noise, y uniform on [0, 1].
    let mut rng = chain_rng(31, 0);
    let y = Array2::from_shape_fn((n, 1), |_| rng.random_range(0.0..1.0));
    let x = Array2::from_shape_fn((n, 1), |(i, _)| 2.0 * y[[i, 0]] + 0.01 * rng.random_range(-1.0..1.0));
    SampleSet::with_labels(x, names(&["x"]), y, names(&["y"])).unwrap()
}

#[test]
fn conditional_samples_respect_label_band() {
    let set = labelled_line(2000);
    for mode in [BatchMode::PerStep, BatchMode::PerTrajectory] {
        let h = 0.02;
        let src = EmpiricalScore::new(
            set.clone(),
            McsConfig { minibatch: 16, bandwidth: vec![h], mode },
        )
        .unwrap();
        let model = src.condition(Some(&[0.5])).unwrap();
        let config = SdeConfig { num_steps: 200, seed: 3, ..Default::default() };
        let (out, chains) =
            sample_chains_traced(&model, None, 200, 1, &config, &src.sched, Integrator::ReverseSde).unwrap();
        for c in &chains {
            assert!(c.max_label_dist <= 6.0, "scaled label distance {}", c.max_label_dist);
        }
        let mean = out.states.mean().unwrap();
        assert!((mean - 1.0).abs() < 0.05, "{mode:?}: conditional mean {mean}");
    }
}

#[test]
fn surrogate_reproduces_probability_flow_samples() {
    let data = gaussian_data(400, 2, 41).mapv(|v| 0.5 * v + 1.0);
    let set = SampleSet::new(data, names(&["a", "b"])).unwrap();
    let src = EmpiricalScore::new(set, McsConfig::default()).unwrap();
    let config = SurrogateConfig {
        epochs: 150,
        sde: SdeConfig { num_steps: 200, seed: 9, ..Default::default() },
        ..Default::default()
    };
    let map = fit_surrogate(&src, None, 600, &config).unwrap();
    assert_eq!(map.train_pairs + map.discarded_pairs + 60, 600);
    assert!(map.holdout_rmse.iter().all(|r| r.is_finite() && *r < 0.25), "{:?}", map.holdout_rmse);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.json");
    map.save(&path).unwrap();
    let back = SurrogateMap::load(&path).unwrap();
    assert_eq!(back, map);
    let samples = back.sample(2000, 1).unwrap();
    let m = samples.states.mean_axis(ndarray::Axis(0)).unwrap();
    assert!((m[0] - 1.0).abs() < 0.1 && (m[1] - 1.0).abs() < 0.1, "{m}");
    assert!(fit_surrogate(&src, None, 50, &config).is_err());
}

#[test]
fn surrogate_file_with_wrong_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let set = SampleSet::new(gaussian_data(200, 1, 2), names(&["a"])).unwrap();
    let src = EmpiricalScore::new(set, McsConfig::default()).unwrap();
    let config = SurrogateConfig {
        epochs: 2,
        sde: SdeConfig { num_steps: 20, ..Default::default() },
        ..Default::default()
    };
    let mut map = fit_surrogate(&src, None, 100, &config).unwrap();
    map.version = 99;
    map.save(&path).unwrap();
    assert!(SurrogateMap::load(&path).is_err());
}
