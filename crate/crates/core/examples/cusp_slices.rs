//! Conditional sampling on the cusp surface with the training-free MCS score:
//! the μ = 0 slice (generate x and λ) and the (μ, λ) = (0, 2) point, whose
//! samples should split between the three roots of x³ − 2x = 0.
//!
//! `cargo run --release --example cusp_slices`

use csgm::data::names;
use csgm::pipeline::{cluster_modes, manifold_residual, run_algorithm1, ManifoldOracle, PipelineConfig};
use csgm::score_mcs::McsConfig;
use csgm::systems::{cusp_roots, cusp_sample, CuspSpec};

fn main() -> csgm::Result<()> {
    let data = cusp_sample(&CuspSpec::default(), 0)?;
    let slice = PipelineConfig {
        labels: names(&["mu"]),
        conditions: vec![vec![0.0]],
        mcs: McsConfig { bandwidth: vec![0.05], ..Default::default() },
        ..Default::default()
    };
    let e = run_algorithm1(&data, &slice)?;
    let res = manifold_residual(e.output(), &ManifoldOracle::Cusp)?;
    println!(
        "μ = 0 slice: median residual {:.4}, {:.1}% below 0.25",
        res.median,
        100.0 * res.fraction_below(0.25)
    );

    let point = PipelineConfig {
        labels: names(&["mu", "lambda"]),
        conditions: vec![vec![0.0, 2.0]],
        mcs: McsConfig { bandwidth: vec![0.05, 0.05], ..Default::default() },
        ..Default::default()
    };
    let e = run_algorithm1(&data, &point)?;
    let cl = cluster_modes(&e.output().column("x")?.to_vec(), 5)?;
    println!("(μ, λ) = (0, 2): roots {:?}", cusp_roots(2.0, 0.0));
    for (c, f) in cl.centers.iter().zip(cl.fractions()) {
        println!("  cluster at {c:.4} holding {:.1}%", 100.0 * f);
    }
    Ok(())
}
