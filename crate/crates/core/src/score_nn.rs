//! Trainable conditional score network and denoising score matching.
//!
//! The network sees standardized states and labels plus the raw time and
//! predicts the injected noise `ε̂`; the score is `s_θ = −ε̂ / β_t`. With the
//! weighting `λ(t) = β²_t` the matching loss `λ ‖−ε/β_t − s_θ‖²` is then
//! exactly `‖ε − ε̂‖²`. Reverse sampling runs in standardized coordinates and
//! maps back at the end.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::SampleSet;
use crate::error::{check_dim, contract, Error, Result};
use crate::nn::{Adam, Mlp, Standardizer};
use crate::sde::{chain_rng, sample_chains, ChainState, Integrator, NoiseSchedule, Schedule, ScoreModel, SdeConfig};

/// Hidden widths of the default architecture.
pub const DEFAULT_HIDDEN: [usize; 7] = [64, 128, 256, 512, 256, 128, 64];

const MODEL_FORMAT: &str = "csgm-score-net";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpScoreNet {
    pub format: String,
    pub version: u32,
    pub net: Mlp,
    pub x_scale: Standardizer,
    pub y_scale: Standardizer,
    pub schedule: NoiseSchedule,
    pub state_names: Vec<String>,
    pub label_names: Vec<String>,
}

/// How the per-sample squared error is weighted over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `λ(t) = β²_t`: plain noise matching.
    #[default]
    Beta2,
    /// `λ(t) = 1`: raw score matching, dominated by small `t`.
    Unit,
}

impl Weighting {
    fn factor(self, beta2: f64) -> f64 {
        match self {
            Weighting::Beta2 => 1.0,
            Weighting::Unit => 1.0 / beta2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weighting: Weighting,
    pub hidden: Vec<usize>,
    pub schedule: NoiseSchedule,
    /// Lower end of the training time distribution `U(t_min, T)`.
    pub t_min: f64,
    pub seed: u64,
    /// Save the model every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 200,
            weighting: Weighting::Beta2,
            hidden: DEFAULT_HIDDEN.to_vec(),
            schedule: NoiseSchedule::vp_default(),
            t_min: 1e-3,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(contract("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(contract("batch size must be at least 1"));
        }
        if !(self.t_min > 0.0 && self.t_min < self.schedule.t_upper()) {
            return Err(contract("training t_min must lie in (0, T)"));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(contract("checkpointing needs a checkpoint directory"));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

impl MlpScoreNet {
    /// Fresh network sized for `data`, with standardization fitted to it.
    pub fn new(data: &SampleSet, config: &TrainConfig) -> Result<Self> {
        let n = data.state_dim();
        let m = data.label_dim();
        let mut widths = vec![n + m + 1];
        widths.extend(&config.hidden);
        widths.push(n);
        let mut rng = chain_rng(config.seed, u64::MAX);
        let y_scale = match &data.labels {
            Some(l) => Standardizer::fit(l.view()),
            None => Standardizer::identity(0),
        };
        Ok(Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            net: Mlp::new(&widths, &mut rng)?,
            x_scale: Standardizer::fit(data.states.view()),
            y_scale,
            schedule: config.schedule,
            state_names: data.state_names.clone(),
            label_names: data.label_names.clone(),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn label_dim(&self) -> usize {
        self.y_scale.dim()
    }

    /// Assembles network inputs `[x, y, t]` from standardized rows.
    fn inputs(&self, x_std: ArrayView2<f64>, y_std: ArrayView2<f64>, t: &[f64]) -> Array2<f64> {
        let (b, n, m) = (x_std.nrows(), self.state_dim(), self.label_dim());
        let mut input = Array2::zeros((b, n + m + 1));
        input.slice_mut(s![.., ..n]).assign(&x_std);
        input.slice_mut(s![.., n..n + m]).assign(&y_std);
        for (i, ti) in t.iter().enumerate() {
            input[[i, n + m]] = *ti;
        }
        input
    }

    /// Noise prediction for standardized states and labels, one time per row.
    pub fn predict_noise(&self, x_std: ArrayView2<f64>, y_std: ArrayView2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        check_dim("network state input", self.state_dim(), x_std.ncols())?;
        check_dim("network label input", self.label_dim(), y_std.ncols())?;
        check_dim("network time input", x_std.nrows(), t.len())?;
        Ok(self.net.forward(self.inputs(x_std, y_std, t).view()))
    }

    /// `s_θ(x, t, y)` in standardized coordinates for a batch at a common time.
    pub fn forward(&self, x_std: ArrayView2<f64>, y_std: ArrayView1<f64>, t: f64) -> Result<Array2<f64>> {
        let ys = broadcast_rows(y_std, x_std.nrows());
        let eps = self.predict_noise(x_std, ys.view(), &vec![t; x_std.nrows()])?;
        let beta = self.schedule.beta2(t).sqrt();
        Ok(eps.mapv(|e| -e / beta))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: MlpScoreNet = serde_json::from_slice(&std::fs::read(path)?)?;
        if m.format != MODEL_FORMAT || m.version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, found {} v{}",
                m.format, m.version
            )));
        }
        Ok(m)
    }
}

fn broadcast_rows(row: ArrayView1<f64>, n: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, row.len()));
    for mut r in out.rows_mut() {
        r.assign(&row);
    }
    out
}

/// Labels are given in data units; states are standardized.
impl ScoreModel for MlpScoreNet {
    fn state_dim(&self) -> usize {
        MlpScoreNet::state_dim(self)
    }

    fn label_dim(&self) -> usize {
        MlpScoreNet::label_dim(self)
    }

    fn score(&self, x: ArrayView1<f64>, t: f64, y: Option<&[f64]>, _chain: &mut ChainState) -> Result<Array1<f64>> {
        let x2 = x.insert_axis(Axis(0));
        let y_std = Array1::from(self.y_scale.apply_vec(y.unwrap_or(&[])));
        Ok(self.forward(x2, y_std.view(), t)?.row(0).to_owned())
    }

    fn score_block(
        &self,
        xs: ArrayView2<f64>,
        t: f64,
        y: Option<&[f64]>,
        _chains: &mut [ChainState],
    ) -> Result<Array2<f64>> {
        let y_std = Array1::from(self.y_scale.apply_vec(y.unwrap_or(&[])));
        self.forward(xs, y_std.view(), t)
    }
}

/// One denoising score-matching evaluation on a mini-batch of standardized
/// rows. Returns the mean weighted loss and its gradients.
pub fn dsm_loss(
    model: &MlpScoreNet,
    x0_std: ArrayView2<f64>,
    y_std: ArrayView2<f64>,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(f64, crate::nn::Grads)> {
    let b = x0_std.nrows();
    if b == 0 {
        return Err(contract("training mini-batch is empty"));
    }
    let sched = &model.schedule;
    let n = x0_std.ncols();
    let t_hi = sched.t_upper();
    let t: Vec<f64> = (0..b).map(|_| rng.random_range(config.t_min..t_hi)).collect();
    let eps = Array2::from_shape_fn((b, n), |_| rng.sample::<f64, _>(StandardNormal));
    let mut xt = Array2::zeros((b, n));
    for i in 0..b {
        let (a, beta) = (sched.alpha(t[i]), sched.beta2(t[i]).sqrt());
        for k in 0..n {
            xt[[i, k]] = a * x0_std[[i, k]] + beta * eps[[i, k]];
        }
    }
    let tape = model.net.forward_tape(model.inputs(xt.view(), y_std, &t).view());
    let out = model.net.output(&tape);
    let mut d_out = out - &eps;
    let mut total = 0.0;
    for i in 0..b {
        let w = config.weighting.factor(sched.beta2(t[i]));
        let row_loss: f64 = d_out.row(i).iter().map(|d| d * d).sum::<f64>() * w;
        if !row_loss.is_finite() {
            return Err(Error::NonFinite {
                step: i,
                t: t[i],
                detail: "training loss is not finite for this mini-batch row".into(),
            });
        }
        total += row_loss;
        d_out.row_mut(i).mapv_inplace(|d| 2.0 * w * d / b as f64);
    }
    let grads = model.net.backward(&tape, d_out.view());
    Ok((total / b as f64, grads))
}

/// Trains a fresh network on `data`; returns it with the per-epoch mean loss.
pub fn train(data: &SampleSet, config: &TrainConfig) -> Result<(MlpScoreNet, Vec<EpochLoss>)> {
    config.validate()?;
    let mut model = MlpScoreNet::new(data, config)?;
    let history = train_in_place(&mut model, data, config)?;
    Ok((model, history))
}

/// Continues training an existing network (its standardization is kept).
pub fn train_in_place(model: &mut MlpScoreNet, data: &SampleSet, config: &TrainConfig) -> Result<Vec<EpochLoss>> {
    config.validate()?;
    check_dim("training data states", model.state_dim(), data.state_dim())?;
    check_dim("training data labels", model.label_dim(), data.label_dim())?;
    let x_std = model.x_scale.apply(data.states.view());
    let y_std = match &data.labels {
        Some(l) => model.y_scale.apply(l.view()),
        None => Array2::zeros((data.len(), 0)),
    };
    let mut rng = chain_rng(config.seed, 0);
    let mut opt = Adam::new(&model.net, config.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(config.batch_size) {
            let xb = x_std.select(Axis(0), chunk);
            let yb = y_std.select(Axis(0), chunk);
            let (loss, grads) = dsm_loss(model, xb.view(), yb.view(), config, &mut rng)?;
            opt.apply(&mut model.net, &grads);
            sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        let loss = sum / count as f64;
        log::debug!("epoch {epoch}: loss {loss:.5}");
        history.push(EpochLoss { epoch, loss });
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            let dir = config.checkpoint_dir.as_ref().expect("validated");
            std::fs::create_dir_all(dir)?;
            model.save(dir.join(format!("checkpoint-{epoch:05}.json")))?;
        }
    }
    if !model.net.is_finite() {
        return Err(contract("training produced non-finite weights"));
    }
    Ok(history)
}

pub fn write_loss_history<W: Write>(w: W, history: &[EpochLoss]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record(["epoch", "loss"])?;
    for h in history {
        writer.write_record([h.epoch.to_string(), crate::data::format_f64(h.loss)])?;
    }
    writer.flush()?;
    Ok(())
}

/// Draws `n` samples conditioned on `y` (data units) and returns them in data
/// units, with the condition attached as constant label columns.
pub fn nn_sample(
    model: &MlpScoreNet,
    y: Option<&[f64]>,
    n: usize,
    config: &SdeConfig,
    integrator: Integrator,
) -> Result<SampleSet> {
    let y = match (y, model.label_dim()) {
        (None, 0) => None,
        (Some(v), m) if v.len() == m => Some(v),
        (got, m) => {
            return Err(Error::Dimension {
                context: "sampling condition",
                expected: m,
                got: got.map_or(0, |v| v.len()),
            })
        }
    };
    let raw = sample_chains(model, y, n, model.state_dim(), config, &model.schedule, integrator)?;
    let states = model.x_scale.invert(raw.states.view());
    let set = SampleSet::new(states, model.state_names.clone())?;
    match y {
        Some(v) => set.attach_constant_labels(&model.label_names, v),
        None => Ok(set),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::names;
    use ndarray::array;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            hidden: vec![8, 8],
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        }
    }

    fn tiny_data() -> SampleSet {
        SampleSet::with_labels(
            array![[0.0, 1.0], [1.0, 0.5], [2.0, 0.0], [3.0, -1.0], [4.0, 0.2]],
            names(&["a", "b"]),
            array![[0.1], [0.2], [0.3], [0.4], [0.5]],
            names(&["y"]),
        )
        .unwrap()
    }

    #[test]
    fn zero_output_layer_gives_zero_score() {
        let mut model = MlpScoreNet::new(&tiny_data(), &tiny_config()).unwrap();
        let last = model.net.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        let s = model.forward(array![[3.0, -2.0]].view(), array![0.7].view(), 0.4).unwrap();
        assert!(s.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = MlpScoreNet::new(&tiny_data(), &tiny_config()).unwrap();
        let x = array![[0.3, -0.2], [1.0, 2.0]];
        let a = model.forward(x.view(), array![0.1].view(), 0.5).unwrap();
        let b = model.forward(x.view(), array![0.1].view(), 0.5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ncols(), 2);
    }

    #[test]
    fn training_is_reproducible() {
        let (m1, h1) = train(&tiny_data(), &tiny_config()).unwrap();
        let (m2, h2) = train(&tiny_data(), &tiny_config()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn rejects_bad_config_and_dims() {
        let bad = TrainConfig { learning_rate: 0.0, ..tiny_config() };
        assert!(train(&tiny_data(), &bad).is_err());
        let model = MlpScoreNet::new(&tiny_data(), &tiny_config()).unwrap();
        let cfg = SdeConfig { num_steps: 5, ..Default::default() };
        assert!(nn_sample(&model, None, 3, &cfg, Integrator::ReverseSde).is_err());
        assert!(nn_sample(&model, Some(&[0.1, 0.2]), 3, &cfg, Integrator::ReverseSde).is_err());
        let out = nn_sample(&model, Some(&[0.1]), 3, &cfg, Integrator::ReverseSde).unwrap();
        assert_eq!(out.column_names(), vec!["a", "b", "y"]);
    }

    #[test]
    fn dsm_loss_reports_nonfinite_rows() {
        let model = MlpScoreNet::new(&tiny_data(), &tiny_config()).unwrap();
        let x = array![[0.0, f64::NAN]];
        let y = array![[0.0]];
        let err = dsm_loss(&model, x.view(), y.view(), &tiny_config(), &mut chain_rng(0, 0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 0, .. }), "{err}");
    }
}
