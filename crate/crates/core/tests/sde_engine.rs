use csgm::sde::{reverse_sde_sample, GaussianScore, NoiseSchedule, SdeConfig};

fn moments(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = v.collect();
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var)
}

fn round_trip(sched: NoiseSchedule, mu0: f64, sigma0: f64) -> (f64, f64) {
    let model = GaussianScore {
        mean: vec![mu0],
        var: sigma0 * sigma0,
        sched,
    };
    let cfg = SdeConfig {
        seed: 2024,
        ..SdeConfig::default()
    };
    let out = reverse_sde_sample(&model, None, 50_000, 1, &cfg, &sched).unwrap();
    moments(out.states.column(0).iter().copied())
}

#[test]
fn gaussian_round_trip_linear_schedule() {
    let (mu0, sigma0) = (2.0, 0.5);
    let (m, v) = round_trip(NoiseSchedule::Linear, mu0, sigma0);
    eprintln!("linear: mean {m} var {v}");
    assert!((m - mu0).abs() < 0.05 * sigma0, "mean {m}");
    assert!((v / (sigma0 * sigma0) - 1.0).abs() < 0.05, "var {v}");
}

#[test]
fn gaussian_round_trip_vp_schedule_standardized() {
    let (m, v) = round_trip(NoiseSchedule::vp_default(), 0.0, 1.0);
    eprintln!("vp: mean {m} var {v}");
    assert!(m.abs() < 0.05, "mean {m}");
    assert!((v - 1.0).abs() < 0.05, "var {v}");
}
