//! Training-free score estimation from the data itself.
//!
//! The forward process turns the empirical distribution into a Gaussian
//! mixture `p_t(x) = Σₙ wₙ N(x; α_t xₙ, β²_t I)`, whose score is
//! `−Σₙ w̄ₙ (x − α_t xₙ) / β²_t` with posterior weights `w̄ₙ` (a softmax).
//! Mini-batches of rows stand in for the full sum; label conditioning
//! picks rows with a Gaussian kernel in label space truncated at
//! [`SUPPORT_RADIUS`] bandwidths.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::weighted::WeightedAliasIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SampleSet;
use crate::error::{check_dim, contract, Error, Result};
use crate::nn::{Adam, Mlp, Standardizer};
use crate::sde::{
    chain_rng, sample_chains_lenient, standard_normal_vec, ChainState, Integrator, NoiseSchedule,
    Schedule, ScoreModel, SdeConfig,
};

/// Rows farther than this many bandwidths from the condition get zero weight.
pub const SUPPORT_RADIUS: f64 = 5.0;

/// Mixture score over `rows` at `(x_t, t)`, with optional per-row log prior
/// weights. Weights are normalized in log space.
pub fn mcs_score(
    x_t: ArrayView1<f64>,
    t: f64,
    rows: ArrayView2<f64>,
    log_prior: Option<&[f64]>,
    sched: &(impl Schedule + ?Sized),
) -> Result<Array1<f64>> {
    if rows.nrows() == 0 {
        return Err(contract("score batch is empty"));
    }
    check_dim("score batch columns", x_t.len(), rows.ncols())?;
    if let Some(lp) = log_prior {
        check_dim("score batch prior weights", rows.nrows(), lp.len())?;
    }
    let a = sched.alpha(t);
    let b2 = sched.beta2(t);
    let mut logits = Vec::with_capacity(rows.nrows());
    for (n, row) in rows.rows().into_iter().enumerate() {
        let mut sq = 0.0;
        for k in 0..x_t.len() {
            let d = x_t[k] - a * row[k];
            sq += d * d;
        }
        logits.push(-sq / (2.0 * b2) + log_prior.map_or(0.0, |lp| lp[n]));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    let mut mean = Array1::<f64>::zeros(x_t.len());
    for (row, l) in rows.rows().into_iter().zip(&logits) {
        let w = (l - max).exp();
        total += w;
        mean.scaled_add(w, &row);
    }
    mean /= total;
    Ok(Array1::from_shape_fn(x_t.len(), |k| -(x_t[k] - a * mean[k]) / b2))
}

/// How often a conditional mini-batch is redrawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BatchMode {
    #[default]
    PerStep,
    PerTrajectory,
}

/// Rows chosen for a conditional score, by index into the dataset.
#[derive(Debug, Clone)]
pub struct Batch {
    pub rows: Vec<usize>,
    /// Log prior weights, present when the batch is the full weighted candidate set.
    pub log_prior: Option<Vec<f64>>,
    /// Largest scaled label distance `‖(yⱼ − y) / h‖` among the rows.
    pub max_scaled_dist: f64,
}

/// Kernel-weighted candidate rows for one condition value.
#[derive(Debug, Clone)]
pub struct Candidates {
    pub rows: Vec<usize>,
    pub log_w: Vec<f64>,
    pub scaled_dist: Vec<f64>,
    sampler: Option<WeightedAliasIndex<f64>>,
}

impl Candidates {
    /// Rows within [`SUPPORT_RADIUS`] bandwidths of `y`. Errors when there are none.
    pub fn new(data: &SampleSet, y: &[f64], h: &[f64]) -> Result<Self> {
        let labels = data
            .labels
            .as_ref()
            .ok_or_else(|| contract("conditioning requires a labelled dataset"))?;
        check_dim("condition value", labels.ncols(), y.len())?;
        check_dim("label bandwidths", labels.ncols(), h.len())?;
        if h.iter().any(|v| !(*v > 0.0)) {
            return Err(contract("label bandwidths must be positive"));
        }
        let mut rows = Vec::new();
        let mut log_w = Vec::new();
        let mut scaled_dist = Vec::new();
        let mut nearest = (f64::INFINITY, 0usize);
        for (j, lab) in labels.rows().into_iter().enumerate() {
            let d2: f64 = lab
                .iter()
                .zip(y)
                .zip(h)
                .map(|((l, c), h)| ((l - c) / h).powi(2))
                .sum();
            if d2 < nearest.0 {
                nearest = (d2, j);
            }
            if d2 <= SUPPORT_RADIUS * SUPPORT_RADIUS {
                rows.push(j);
                log_w.push(-0.5 * d2);
                scaled_dist.push(d2.sqrt());
            }
        }
        if rows.is_empty() {
            return Err(Error::LabelOutOfRange {
                requested: y.to_vec(),
                nearest: labels.row(nearest.1).to_vec(),
            });
        }
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let sampler = Some(WeightedAliasIndex::new(weights).map_err(|e| contract(e.to_string()))?);
        Ok(Self {
            rows,
            log_w,
            scaled_dist,
            sampler,
        })
    }

    /// Every row, equally weighted.
    pub fn all(n: usize) -> Self {
        Self {
            rows: (0..n).collect(),
            log_w: vec![0.0; n],
            scaled_dist: vec![0.0; n],
            sampler: None,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn max_scaled_dist(&self) -> f64 {
        self.scaled_dist.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Draws a batch of at most `n_m` rows. Small candidate sets are used
    /// whole with their kernel weights; otherwise rows are drawn with
    /// probability proportional to the kernel (uniform sets without replacement).
    pub fn draw(&self, n_m: usize, rng: &mut impl Rng) -> Batch {
        if self.len() <= n_m {
            let max_scaled_dist = self.scaled_dist.iter().copied().fold(0.0, f64::max);
            return Batch {
                rows: self.rows.clone(),
                log_prior: Some(self.log_w.clone()),
                max_scaled_dist,
            };
        }
        let picks: Vec<usize> = match &self.sampler {
            Some(dist) => (0..n_m).map(|_| dist.sample(rng)).collect(),
            None => rand::seq::index::sample(rng, self.len(), n_m).into_vec(),
        };
        let max_scaled_dist = picks.iter().map(|&i| self.scaled_dist[i]).fold(0.0, f64::max);
        Batch {
            rows: picks.iter().map(|&i| self.rows[i]).collect(),
            log_prior: None,
            max_scaled_dist,
        }
    }
}

/// Draws a conditional mini-batch for label value `y` with bandwidths `h`.
pub fn conditional_batch(
    data: &SampleSet,
    y: &[f64],
    h: &[f64],
    n_m: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    if n_m == 0 {
        return Err(contract("mini-batch size must be at least 1"));
    }
    Ok(Candidates::new(data, y, h)?.draw(n_m, rng))
}

/// Default label bandwidth: 2% of each label column's range.
pub fn default_bandwidth(data: &SampleSet) -> Vec<f64> {
    data.labels
        .as_ref()
        .map(|l| {
            l.columns()
                .into_iter()
                .map(|c| {
                    let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let range = hi - lo;
                    if range > 0.0 {
                        0.02 * range
                    } else {
                        1.0
                    }
                })
                .collect()
        })
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McsConfig {
    /// Mini-batch size `N_m`; clamped to the candidate count.
    pub minibatch: usize,
    /// Per-label bandwidth; empty means [`default_bandwidth`].
    pub bandwidth: Vec<f64>,
    pub mode: BatchMode,
}

impl Default for McsConfig {
    fn default() -> Self {
        Self {
            minibatch: 256,
            bandwidth: Vec::new(),
            mode: BatchMode::PerStep,
        }
    }
}

/// Empirical (mini-batch Monte Carlo) score over a dataset.
#[derive(Debug, Clone)]
pub struct EmpiricalScore {
    pub data: SampleSet,
    pub config: McsConfig,
    pub sched: NoiseSchedule,
    bandwidth: Vec<f64>,
}

impl EmpiricalScore {
    pub fn new(data: SampleSet, config: McsConfig) -> Result<Self> {
        if config.minibatch == 0 {
            return Err(contract("mini-batch size must be at least 1"));
        }
        let bandwidth = if config.bandwidth.is_empty() {
            default_bandwidth(&data)
        } else {
            config.bandwidth.clone()
        };
        check_dim("label bandwidths", data.label_dim(), bandwidth.len())?;
        if bandwidth.iter().any(|h| !(*h > 0.0)) {
            return Err(contract("label bandwidths must be positive"));
        }
        Ok(Self {
            data,
            config,
            sched: NoiseSchedule::Linear,
            bandwidth,
        })
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    /// Binds a condition value, precomputing the candidate rows.
    pub fn condition(&self, y: Option<&[f64]>) -> Result<ConditionedMcs<'_>> {
        let candidates = match y {
            Some(y) => Candidates::new(&self.data, y, &self.bandwidth)?,
            None => Candidates::all(self.data.len()),
        };
        Ok(ConditionedMcs {
            source: self,
            candidates,
        })
    }

    /// Conditional score at one point, drawing a fresh batch.
    pub fn mcs_conditional_score(
        &self,
        x_t: ArrayView1<f64>,
        t: f64,
        y: &[f64],
        rng: &mut impl Rng,
    ) -> Result<Array1<f64>> {
        let batch = conditional_batch(&self.data, y, &self.bandwidth, self.config.minibatch, rng)?;
        let rows = self.data.states.select(Axis(0), &batch.rows);
        mcs_score(x_t, t, rows.view(), batch.log_prior.as_deref(), &self.sched)
    }
}

/// An [`EmpiricalScore`] with its condition fixed; usable directly by the samplers.
#[derive(Debug, Clone)]
pub struct ConditionedMcs<'a> {
    source: &'a EmpiricalScore,
    pub candidates: Candidates,
}

impl ConditionedMcs<'_> {
    fn rows_for(&self, chain: &mut ChainState) -> Batch {
        let n_m = self.source.config.minibatch;
        match self.source.config.mode {
            BatchMode::PerStep => self.candidates.draw(n_m, &mut chain.rng),
            BatchMode::PerTrajectory => {
                if chain.cached_rows.is_none() {
                    let batch = self.candidates.draw(n_m, &mut chain.rng);
                    chain.max_label_dist = chain.max_label_dist.max(batch.max_scaled_dist);
                    if batch.log_prior.is_some() {
                        // Whole candidate set; nothing to cache.
                        return batch;
                    }
                    chain.cached_rows = Some(batch.rows);
                }
                Batch {
                    rows: chain.cached_rows.clone().expect("cached above"),
                    log_prior: None,
                    max_scaled_dist: chain.max_label_dist,
                }
            }
        }
    }
}

impl ScoreModel for ConditionedMcs<'_> {
    fn state_dim(&self) -> usize {
        self.source.data.state_dim()
    }

    fn label_dim(&self) -> usize {
        0
    }

    fn score(
        &self,
        x: ArrayView1<f64>,
        t: f64,
        _y: Option<&[f64]>,
        chain: &mut ChainState,
    ) -> Result<Array1<f64>> {
        let states = &self.source.data.states;
        let sched = &self.source.sched;
        if self.candidates.len() <= self.source.config.minibatch {
            // The whole weighted candidate set; no draw needed.
            chain.max_label_dist = chain.max_label_dist.max(self.candidates.max_scaled_dist());
            return indexed_score(x, t, states.view(), &self.candidates.rows, Some(&self.candidates.log_w), sched);
        }
        let batch = self.rows_for(chain);
        chain.max_label_dist = chain.max_label_dist.max(batch.max_scaled_dist);
        indexed_score(x, t, states.view(), &batch.rows, batch.log_prior.as_deref(), sched)
    }
}

/// [`mcs_score`] over the rows `idx` of `states`, without gathering them.
fn indexed_score(
    x_t: ArrayView1<f64>,
    t: f64,
    states: ArrayView2<f64>,
    idx: &[usize],
    log_prior: Option<&[f64]>,
    sched: &(impl Schedule + ?Sized),
) -> Result<Array1<f64>> {
    let Some(flat) = states.as_slice() else {
        let rows = states.select(Axis(0), idx);
        return mcs_score(x_t, t, rows.view(), log_prior, sched);
    };
    if idx.is_empty() {
        return Err(contract("score batch is empty"));
    }
    let d = states.ncols();
    check_dim("score batch columns", x_t.len(), d)?;
    let x: Vec<f64> = x_t.to_vec();
    let a = sched.alpha(t);
    let b2 = sched.beta2(t);
    let mut logits = Vec::with_capacity(idx.len());
    for (n, &i) in idx.iter().enumerate() {
        let row = &flat[i * d..(i + 1) * d];
        let sq: f64 = x.iter().zip(row).map(|(xk, rk)| (xk - a * rk).powi(2)).sum();
        logits.push(-sq / (2.0 * b2) + log_prior.map_or(0.0, |lp| lp[n]));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    let mut mean = vec![0.0; d];
    for (&i, l) in idx.iter().zip(&logits) {
        let w = (l - max).exp();
        total += w;
        for (m, r) in mean.iter_mut().zip(&flat[i * d..(i + 1) * d]) {
            *m += w * r;
        }
    }
    Ok(Array1::from_shape_fn(d, |k| -(x[k] - a * mean[k] / total) / b2))
}

/// Smooth regression map from standard-normal draws to data samples, fit on
/// probability-flow pairs `(z, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateMap {
    pub format: String,
    pub version: u32,
    pub net: Mlp,
    pub out_scale: Standardizer,
    pub condition: Option<Vec<f64>>,
    pub state_names: Vec<String>,
    pub label_names: Vec<String>,
    pub train_pairs: usize,
    pub discarded_pairs: usize,
    pub holdout_rmse: Vec<f64>,
}

const SURROGATE_FORMAT: &str = "csgm-surrogate-map";
const SURROGATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    pub sde: SdeConfig,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 200,
            batch_size: 128,
            learning_rate: 1e-3,
            holdout_fraction: 0.1,
            sde: SdeConfig::default(),
        }
    }
}

pub fn fit_surrogate(
    source: &EmpiricalScore,
    y: Option<&[f64]>,
    n_pairs: usize,
    config: &SurrogateConfig,
) -> Result<SurrogateMap> {
    if n_pairs < 100 {
        return Err(contract("surrogate fitting needs at least 100 pairs"));
    }
    let dim = source.data.state_dim();
    let model = source.condition(y)?;
    let (ends, ok) = sample_chains_lenient(
        &model,
        None,
        n_pairs,
        dim,
        &config.sde,
        &source.sched,
        Integrator::ProbabilityFlow,
    )?;
    // Chain i started from the first `dim` normals of its own stream.
    let kept: Vec<usize> = (0..n_pairs).filter(|&i| ok[i]).collect();
    let discarded = n_pairs - kept.len();
    if kept.len() < 10 {
        return Err(contract(format!("only {} finite probability-flow endpoints", kept.len())));
    }
    let mut z = Array2::zeros((kept.len(), dim));
    let mut x = Array2::zeros((kept.len(), dim));
    for (r, &i) in kept.iter().enumerate() {
        let mut rng = chain_rng(config.sde.seed, i as u64);
        z.row_mut(r).assign(&standard_normal_vec(&mut rng, dim));
        x.row_mut(r).assign(&ends.row(i));
    }
    let out_scale = Standardizer::fit(x.view());
    let xs = out_scale.apply(x.view());

    let n_hold = ((kept.len() as f64) * config.holdout_fraction).round() as usize;
    let n_train = kept.len() - n_hold;
    let mut widths = vec![dim];
    widths.extend(&config.hidden);
    widths.push(dim);
    let mut rng = chain_rng(config.sde.seed ^ 0x5eed, u64::MAX);
    let mut net = Mlp::new(&widths, &mut rng)?;
    let mut opt = Adam::new(&net, config.learning_rate);
    let mut order: Vec<usize> = (0..n_train).collect();
    for _ in 0..config.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let zb = z.select(Axis(0), chunk);
            let xb = xs.select(Axis(0), chunk);
            let tape = net.forward_tape(zb.view());
            let d = (net.output(&tape) - &xb) * (2.0 / chunk.len() as f64);
            let g = net.backward(&tape, d.view());
            opt.apply(&mut net, &g);
        }
    }
    if !net.is_finite() {
        return Err(contract("surrogate training diverged"));
    }
    let holdout_rmse = if n_hold > 0 {
        let idx: Vec<usize> = (n_train..kept.len()).collect();
        let pred = out_scale.invert(net.forward(z.select(Axis(0), &idx).view()).view());
        let truth = x.select(Axis(0), &idx);
        (0..dim)
            .map(|k| {
                let se: f64 = pred
                    .column(k)
                    .iter()
                    .zip(truth.column(k))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                (se / n_hold as f64).sqrt()
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(SurrogateMap {
        format: SURROGATE_FORMAT.into(),
        version: SURROGATE_VERSION,
        net,
        out_scale,
        condition: y.map(|v| v.to_vec()),
        state_names: source.data.state_names.clone(),
        label_names: source.data.label_names.clone(),
        train_pairs: n_train,
        discarded_pairs: discarded,
        holdout_rmse,
    })
}

impl SurrogateMap {
    /// One forward pass per draw.
    pub fn sample(&self, n: usize, seed: u64) -> Result<SampleSet> {
        let dim = self.net.input_dim();
        let mut z = Array2::zeros((n, dim));
        for (i, mut row) in z.rows_mut().into_iter().enumerate() {
            let mut rng = chain_rng(seed, i as u64);
            row.assign(&standard_normal_vec(&mut rng, dim));
        }
        let x = self.out_scale.invert(self.net.forward(z.view()).view());
        let set = SampleSet::new(x, self.state_names.clone())?;
        match &self.condition {
            Some(c) => set.attach_constant_labels(&self.label_names, c),
            None => Ok(set),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: SurrogateMap = serde_json::from_slice(&std::fs::read(path)?)?;
        if m.format != SURROGATE_FORMAT || m.version != SURROGATE_VERSION {
            return Err(Error::Format(format!(
                "expected {SURROGATE_FORMAT} v{SURROGATE_VERSION}, found {} v{}",
                m.format, m.version
            )));
        }
        Ok(m)
    }
}
