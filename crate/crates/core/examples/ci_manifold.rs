//! Chafee–Infante slow manifold: simulate Galerkin trajectories, find the
//! intrinsic coordinates with diffusion maps, and lift (α₁, α₂) to the
//! remaining modes with geometric harmonics.

use std::time::Instant;

use csgm::manifold::{dmaps, gh_fit, local_jacobian_check, median_epsilon, select_nonharmonic};
use csgm::systems::{ci_dataset, CiGalerkin, CiTrajectoryConfig};
use ndarray::{s, Axis};

fn main() -> csgm::Result<()> {
    let n_init: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(40);
    let eps_scale: f64 = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(0.05);
    let t0 = Instant::now();
    let data = ci_dataset(&CiGalerkin::default(), n_init, 7, &CiTrajectoryConfig::default())?;
    println!("{} snapshots from {n_init} trajectories ({:.1?})", data.len(), t0.elapsed());
    let x = data.states.view();
    for k in 0..4 {
        let c = x.column(k);
        let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!("  a{} range [{lo:.3}, {hi:.3}]", k + 1);
    }

    let t0 = Instant::now();
    let eps = median_epsilon(x, eps_scale)?;
    let mut emb = dmaps(x, eps, 8)?;
    let sel = select_nonharmonic(&mut emb, 0.5)?;
    println!("diffusion maps ε = {eps:.4} ({:.1?})", t0.elapsed());
    println!("  eigenvalues {:?}", emb.eigenvalues.slice(s![1..]));
    println!("  residuals   {:?}", &emb.residuals[1..]);
    println!("  non-harmonic coordinates {sel:?}");

    if sel.len() >= 2 {
        let phi = emb.eigenvectors.select(Axis(1), &sel[..2]);
        let a12 = x.slice(s![.., ..2]).to_owned();
        let rep = local_jacobian_check(phi.view(), a12.view(), 12)?;
        println!("  one-to-one check: {:.1}% of neighborhoods non-singular", 100.0 * rep.fraction_nonsingular);
    }

    // Hold out every fifth row and lift (α₁, α₂) → (α₃..α₁₀).
    let train: Vec<usize> = (0..data.len()).filter(|i| i % 5 != 0).collect();
    let test: Vec<usize> = (0..data.len()).filter(|i| i % 5 == 0).collect();
    let xin = x.slice(s![.., ..2]).to_owned();
    let xout = x.slice(s![.., 2..]).to_owned();
    let gh_eps = median_epsilon(xin.select(Axis(0), &train).view(), 0.01)?;
    let gh = gh_fit(xin.select(Axis(0), &train).view(), xout.select(Axis(0), &train).view(), gh_eps, 1e-3)?;
    let pred = gh.extend_batch(xin.select(Axis(0), &test).view())?;
    let truth = xout.select(Axis(0), &test);
    for k in 0..8 {
        let col = xout.column(k);
        let range = col.iter().copied().fold(f64::NEG_INFINITY, f64::max) - col.iter().copied().fold(f64::INFINITY, f64::min);
        let rmse = ((&pred.column(k) - &truth.column(k)).mapv(|v| v * v).mean().unwrap_or(0.0)).sqrt();
        println!("  a{}: held-out RMSE {:.2}% of range", k + 3, 100.0 * rmse / range);
    }
    Ok(())
}
