//! Tubular reactor: trace the steady-state curve in Da by pseudo-arclength
//! continuation, locate the folds, and solve for every steady state at one Da.
//!
//! `cargo run --release --example reactor_continuation -- 0.06`

use csgm::systems::{pfr_folds, pfr_steady_states, pfr_trace, ContinuationConfig, PfrSpec};

fn main() -> csgm::Result<()> {
    let da: f64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0.06);
    let spec = PfrSpec::default();
    let trace = pfr_trace(&PfrSpec { da: 0.0, ..spec.clone() }, &ContinuationConfig::default())?;
    println!("traced {} points", trace.len());
    for f in pfr_folds(&trace) {
        println!("  fold at Da = {f:.5}");
    }
    let states = pfr_steady_states(&PfrSpec { da, ..spec })?;
    println!("{} steady states at Da = {da}", states.len());
    for s in &states {
        println!(
            "  inlet conversion {:.5}, inlet temperature {:.5}, residual {:.1e}",
            s.inlet_conversion(),
            s.x2[0],
            s.residual
        );
    }
    Ok(())
}
