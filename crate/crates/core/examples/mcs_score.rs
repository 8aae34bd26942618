//! The Monte Carlo score against the exact score of a Gaussian mixture:
//! the full-batch estimate is exact; mini-batches trade accuracy for cost.
//!
//! `cargo run --release --example mcs_score`

use csgm::score_mcs::mcs_score;
use csgm::sde::{chain_rng, NoiseSchedule, Schedule};
use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::Rng;

fn main() -> csgm::Result<()> {
    let sched = NoiseSchedule::Linear;
    let mut rng = chain_rng(3, 0);
    let data = Array2::from_shape_fn((5000, 2), |_| rng.random_range(-1.0..1.0));
    let t = 0.3;
    let (a, b2) = (sched.alpha(t), sched.beta2(t));
    for &m in &[5000usize, 1024, 256, 64] {
        let mut errs = Vec::new();
        for _ in 0..200 {
            let x = Array1::from_shape_fn(2, |_| rng.random_range(-1.5..1.5));
            // Exact score of the perturbed empirical distribution.
            let logw: Vec<f64> = data.rows().into_iter().map(|r| -((&x - &(&r * a)).mapv(|v| v * v).sum()) / (2.0 * b2)).collect();
            let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
            let total: f64 = w.iter().sum();
            let mean = data.t().dot(&Array1::from(w)) / total;
            let exact = -(&x - &(mean * a)) / b2;
            let idx = sample(&mut rng, data.nrows(), m).into_vec();
            let est = mcs_score(x.view(), t, data.select(Axis(0), &idx).view(), None, &sched)?;
            let rel = (&est - &exact).mapv(|v| v * v).sum().sqrt() / exact.mapv(|v| v * v).sum().sqrt();
            errs.push(rel);
        }
        errs.sort_by(f64::total_cmp);
        println!("N_m = {m:>4}: median relative error {:.2e}", errs[errs.len() / 2]);
    }
    Ok(())
}
