//! Train the conditional score network on the cusp surface and sample it at
//! (μ, λ) = (0, 2), saving and reloading the model on the way.
//!
//! `cargo run --release --example train_score_net -- 30`

use csgm::pipeline::cluster_modes;
use csgm::score_nn::{nn_sample, train, MlpScoreNet, TrainConfig};
use csgm::sde::{Integrator, SdeConfig};
use csgm::systems::{cusp_sample, CuspSpec};

fn main() -> csgm::Result<()> {
    env_logger::init();
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(30);
    let data = cusp_sample(&CuspSpec::default(), 0)?.relabel(&["mu", "lambda"])?;
    let (model, history) = train(&data, &TrainConfig { epochs, ..Default::default() })?;
    for h in history.iter().step_by((epochs / 10).max(1)) {
        println!("epoch {:>4}: loss {:.4}", h.epoch, h.loss);
    }
    let path = std::env::temp_dir().join("csgm-cusp-net.json");
    model.save(&path)?;
    let model = MlpScoreNet::load(&path)?;
    let samples = nn_sample(&model, Some(&[0.0, 2.0]), 1000, &SdeConfig::default(), Integrator::ReverseSde)?;
    let cl = cluster_modes(&samples.column("x")?.to_vec(), 5)?;
    println!("clusters at {:?} with fractions {:?}", cl.centers, cl.fractions());
    Ok(())
}
