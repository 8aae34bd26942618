//! Noise schedules, forward perturbation, and the reverse-time integrators
//! (Euler–Maruyama for the SDE, explicit Euler for the probability-flow ODE).
//!
//! Forward process: `dx = b(t) x dt + g(t) dB`, with marginals
//! `x_t | x_0 ~ N(α_t x_0, β²_t I)`. We carry the squared diffusion `g²(t)`
//! explicitly, `g² = dβ²/dt − 2 b β²` where `b = d log α / dt`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SampleSet;
use crate::error::{check_dim, contract, Error, Result};

/// Chains integrated together in one batched block. Fixed so results do not
/// depend on the number of worker threads.
pub const CHAIN_BLOCK: usize = 64;

/// Time-dependent coefficients of a forward noising process.
pub trait Schedule: Sync {
    fn alpha(&self, t: f64) -> f64;
    fn beta2(&self, t: f64) -> f64;
    /// Drift coefficient `b(t) = d log α_t / dt`.
    fn drift_coef(&self, t: f64) -> f64;
    /// Squared diffusion rate `g²(t)`.
    fn g2(&self, t: f64) -> f64;
    /// Largest time at which the coefficients are finite.
    fn t_upper(&self) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseSchedule {
    /// `α_t = 1 − t`, `β²_t = t`.
    Linear,
    /// Variance preserving: rate `β(t) = beta_min + beta_d t`,
    /// `α_t = exp(−½∫β)`, `β²_t = 1 − exp(−∫β)`.
    VariancePreserving { beta_min: f64, beta_d: f64 },
}

impl NoiseSchedule {
    /// Variance-preserving schedule with the rates used for the trained network.
    pub fn vp_default() -> Self {
        NoiseSchedule::VariancePreserving {
            beta_min: 0.001,
            beta_d: 3.0,
        }
    }

    fn vp_integral(beta_min: f64, beta_d: f64, t: f64) -> f64 {
        beta_min * t + 0.5 * beta_d * t * t
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSchedule::Linear => Ok(()),
            NoiseSchedule::VariancePreserving { beta_min, beta_d } => {
                if beta_min > 0.0 && beta_d >= 0.0 && beta_min.is_finite() && beta_d.is_finite() {
                    Ok(())
                } else {
                    Err(contract("variance-preserving schedule needs beta_min > 0, beta_d >= 0"))
                }
            }
        }
    }
}

/// Linear-schedule coefficients blow up at t = 1; integration stops this far short.
const LINEAR_T_GAP: f64 = 1e-3;

impl Schedule for NoiseSchedule {
    fn alpha(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::Linear => 1.0 - t,
            NoiseSchedule::VariancePreserving { beta_min, beta_d } => {
                (-0.5 * Self::vp_integral(beta_min, beta_d, t)).exp()
            }
        }
    }

    fn beta2(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::Linear => t,
            NoiseSchedule::VariancePreserving { beta_min, beta_d } => {
                -(-Self::vp_integral(beta_min, beta_d, t)).exp_m1()
            }
        }
    }

    fn drift_coef(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::Linear => -1.0 / (1.0 - t),
            NoiseSchedule::VariancePreserving { beta_min, beta_d } => {
                -0.5 * (beta_min + beta_d * t)
            }
        }
    }

    fn g2(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::Linear => (1.0 + t) / (1.0 - t),
            NoiseSchedule::VariancePreserving { beta_min, beta_d } => beta_min + beta_d * t,
        }
    }

    fn t_upper(&self) -> f64 {
        match self {
            NoiseSchedule::Linear => 1.0 - LINEAR_T_GAP,
            NoiseSchedule::VariancePreserving { .. } => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeConfig {
    pub num_steps: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub seed: u64,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self {
            num_steps: 1000,
            t_min: 1e-3,
            t_max: 1.0,
            seed: 0,
        }
    }
}

impl SdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(contract(format!(
                "need 0 < t_min < t_max <= 1, got t_min = {}, t_max = {}",
                self.t_min, self.t_max
            )));
        }
        if self.num_steps == 0 {
            return Err(contract("num_steps must be at least 1"));
        }
        Ok(())
    }

    /// Parses a key-value (TOML) run-config; unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SdeConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Uniform grid from the (schedule-capped) upper time down to `t_min`;
    /// strictly decreasing, last entry exactly `t_min`.
    pub fn time_grid(&self, sched: &(impl Schedule + ?Sized)) -> Result<Vec<f64>> {
        self.validate()?;
        let top = self.t_max.min(sched.t_upper());
        if top <= self.t_min {
            return Err(contract("t_min is above the schedule's usable time range"));
        }
        let n = self.num_steps;
        let mut grid: Vec<f64> = (0..=n)
            .map(|i| top + (self.t_min - top) * (i as f64 / n as f64))
            .collect();
        grid[n] = self.t_min;
        Ok(grid)
    }
}

/// Independent RNG stream for one sampling chain.
pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

pub fn standard_normal_vec(rng: &mut impl Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.sample(StandardNormal))
}

/// Per-chain mutable state threaded through score evaluations.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub index: u64,
    pub rng: ChaCha8Rng,
    /// Rows held fixed for the whole trajectory (per-trajectory mini-batches).
    pub cached_rows: Option<Vec<usize>>,
    /// Largest label distance of any data row that fed this chain's scores.
    pub max_label_dist: f64,
}

impl ChainState {
    pub fn new(seed: u64, index: u64) -> Self {
        Self {
            index,
            rng: chain_rng(seed, index),
            cached_rows: None,
            max_label_dist: 0.0,
        }
    }
}

/// A conditional score `s(x, t, y) ≈ ∇ₓ log p_t(x | y)`.
pub trait ScoreModel: Sync {
    fn state_dim(&self) -> usize;
    fn label_dim(&self) -> usize;

    fn score(
        &self,
        x: ArrayView1<f64>,
        t: f64,
        y: Option<&[f64]>,
        chain: &mut ChainState,
    ) -> Result<Array1<f64>>;

    /// Scores for a block of chains at a common time; row `i` belongs to `chains[i]`.
    fn score_block(
        &self,
        xs: ArrayView2<f64>,
        t: f64,
        y: Option<&[f64]>,
        chains: &mut [ChainState],
    ) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(xs.raw_dim());
        for ((x, mut o), chain) in xs.rows().into_iter().zip(out.rows_mut()).zip(chains.iter_mut()) {
            o.assign(&self.score(x, t, y, chain)?);
        }
        Ok(out)
    }
}

/// Samples `x_t | x_0`: returns `α_t x0 + β_t noise`.
pub fn perturb(
    x0: ArrayView1<f64>,
    t: f64,
    noise: ArrayView1<f64>,
    sched: &(impl Schedule + ?Sized),
) -> Result<Array1<f64>> {
    check_dim("perturb noise", x0.len(), noise.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(contract(format!("perturb time {t} outside [0, 1]")));
    }
    let a = sched.alpha(t);
    let b = sched.beta2(t).max(0.0).sqrt();
    Ok(&x0 * a + &noise * b)
}

fn check_reverse(x: usize, score: usize, t_i: f64, t_next: f64) -> Result<()> {
    check_dim("score vector", x, score)?;
    if !(t_next < t_i) {
        return Err(contract(format!(
            "reverse step must decrease time, got {t_i} -> {t_next}"
        )));
    }
    Ok(())
}

/// One Euler–Maruyama step of the reverse SDE with explicit noise `z`:
/// `x + δt (b x − g² s) + √|δt| g z`, `δt = t_next − t_i < 0`.
pub fn reverse_sde_step_with_noise(
    x: ArrayView1<f64>,
    t_i: f64,
    t_next: f64,
    score: ArrayView1<f64>,
    sched: &(impl Schedule + ?Sized),
    z: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    check_reverse(x.len(), score.len(), t_i, t_next)?;
    check_dim("noise vector", x.len(), z.len())?;
    let dt = t_next - t_i;
    let b = sched.drift_coef(t_i);
    let g2 = sched.g2(t_i);
    let g = g2.max(0.0).sqrt();
    let diff = (-dt).sqrt() * g;
    Ok(Array1::from_shape_fn(x.len(), |k| {
        x[k] + dt * (b * x[k] - g2 * score[k]) + diff * z[k]
    }))
}

pub fn reverse_sde_step(
    x: ArrayView1<f64>,
    t_i: f64,
    t_next: f64,
    score: ArrayView1<f64>,
    sched: &(impl Schedule + ?Sized),
    rng: &mut impl Rng,
) -> Result<Array1<f64>> {
    let z = standard_normal_vec(rng, x.len());
    reverse_sde_step_with_noise(x, t_i, t_next, score, sched, z.view())
}

/// One explicit Euler step of the probability-flow ODE
/// `dx = (b x − ½ g² s) dt`.
pub fn probability_flow_step(
    x: ArrayView1<f64>,
    t_i: f64,
    t_next: f64,
    score: ArrayView1<f64>,
    sched: &(impl Schedule + ?Sized),
) -> Result<Array1<f64>> {
    check_reverse(x.len(), score.len(), t_i, t_next)?;
    let dt = t_next - t_i;
    let b = sched.drift_coef(t_i);
    let g2 = sched.g2(t_i);
    Ok(Array1::from_shape_fn(x.len(), |k| {
        x[k] + dt * (b * x[k] - 0.5 * g2 * score[k])
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    ReverseSde,
    ProbabilityFlow,
}

fn state_names(dim: usize) -> Vec<String> {
    (0..dim).map(|i| format!("s{i}")).collect()
}

fn check_model(model: &dyn ScoreModel, y: Option<&[f64]>, dim: usize) -> Result<()> {
    check_dim("sampler state dimension", model.state_dim(), dim)?;
    let ly = y.map_or(0, |v| v.len());
    check_dim("sampler label dimension", model.label_dim(), ly)
}

/// Integrates `n` chains from `N(0, I)` at the top of the time grid down to
/// `t_min`, returning the final states (columns named `s0, s1, …`).
pub fn sample_chains(
    model: &dyn ScoreModel,
    y: Option<&[f64]>,
    n: usize,
    dim: usize,
    config: &SdeConfig,
    sched: &(impl Schedule + ?Sized),
    integrator: Integrator,
) -> Result<SampleSet> {
    Ok(sample_chains_traced(model, y, n, dim, config, sched, integrator)?.0)
}

/// Integrates like [`sample_chains`] but keeps going when individual chains
/// diverge; their rows come back as NaN and are flagged `false`.
pub fn sample_chains_lenient(
    model: &dyn ScoreModel,
    y: Option<&[f64]>,
    n: usize,
    dim: usize,
    config: &SdeConfig,
    sched: &(impl Schedule + ?Sized),
    integrator: Integrator,
) -> Result<(Array2<f64>, Vec<bool>)> {
    let (states, _, ok) = run_blocks(model, y, n, dim, config, sched, integrator, true)?;
    Ok((states, ok))
}

/// As [`sample_chains`], also returning each chain's final [`ChainState`].
pub fn sample_chains_traced(
    model: &dyn ScoreModel,
    y: Option<&[f64]>,
    n: usize,
    dim: usize,
    config: &SdeConfig,
    sched: &(impl Schedule + ?Sized),
    integrator: Integrator,
) -> Result<(SampleSet, Vec<ChainState>)> {
    let (states, chains, _) = run_blocks(model, y, n, dim, config, sched, integrator, false)?;
    Ok((SampleSet::new(states, state_names(dim))?, chains))
}

#[allow(clippy::too_many_arguments)]
fn run_blocks(
    model: &dyn ScoreModel,
    y: Option<&[f64]>,
    n: usize,
    dim: usize,
    config: &SdeConfig,
    sched: &(impl Schedule + ?Sized),
    integrator: Integrator,
    lenient: bool,
) -> Result<(Array2<f64>, Vec<ChainState>, Vec<bool>)> {
    check_model(model, y, dim)?;
    if n == 0 {
        return Err(contract("requested zero samples"));
    }
    let grid = config.time_grid(sched)?;
    let blocks: Vec<(usize, usize)> = (0..n)
        .step_by(CHAIN_BLOCK)
        .map(|start| (start, (start + CHAIN_BLOCK).min(n)))
        .collect();
    let results: Vec<Result<BlockOut>> = blocks
        .par_iter()
        .map(|&(start, end)| {
            let block = Block {
                start,
                end,
                dim,
                seed: config.seed,
                lenient,
            };
            integrate_block(model, y, &block, &grid, sched, integrator)
        })
        .collect();
    let mut states = Array2::zeros((n, dim));
    let mut chains = Vec::with_capacity(n);
    let mut ok = Vec::with_capacity(n);
    for (res, &(start, end)) in results.into_iter().zip(&blocks) {
        let (block, block_chains, block_ok) = res?;
        states.slice_mut(ndarray::s![start..end, ..]).assign(&block);
        chains.extend(block_chains);
        ok.extend(block_ok);
    }
    Ok((states, chains, ok))
}

struct Block {
    start: usize,
    end: usize,
    dim: usize,
    seed: u64,
    lenient: bool,
}

type BlockOut = (Array2<f64>, Vec<ChainState>, Vec<bool>);

fn integrate_block(
    model: &dyn ScoreModel,
    y: Option<&[f64]>,
    block: &Block,
    grid: &[f64],
    sched: &(impl Schedule + ?Sized),
    integrator: Integrator,
) -> Result<BlockOut> {
    let dim = block.dim;
    let mut chains: Vec<ChainState> = (block.start..block.end)
        .map(|i| ChainState::new(block.seed, i as u64))
        .collect();
    let mut alive = vec![true; chains.len()];
    let mut xs = Array2::zeros((chains.len(), dim));
    for (mut row, chain) in xs.rows_mut().into_iter().zip(chains.iter_mut()) {
        row.assign(&standard_normal_vec(&mut chain.rng, dim));
    }
    for (step, w) in grid.windows(2).enumerate() {
        let (t_i, t_next) = (w[0], w[1]);
        let scores = model.score_block(xs.view(), t_i, y, &mut chains)?;
        let dt = t_next - t_i;
        let b = sched.drift_coef(t_i);
        let g2 = sched.g2(t_i);
        let diff = (-dt).sqrt() * g2.max(0.0).sqrt();
        for (((mut x, s), chain), live) in xs
            .axis_iter_mut(Axis(0))
            .zip(scores.axis_iter(Axis(0)))
            .zip(chains.iter_mut())
            .zip(alive.iter_mut())
        {
            if !*live {
                continue;
            }
            match integrator {
                Integrator::ReverseSde => {
                    for k in 0..dim {
                        let z: f64 = chain.rng.sample(StandardNormal);
                        x[k] += dt * (b * x[k] - g2 * s[k]) + diff * z;
                    }
                }
                Integrator::ProbabilityFlow => {
                    for k in 0..dim {
                        x[k] += dt * (b * x[k] - 0.5 * g2 * s[k]);
                    }
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                if !block.lenient {
                    return Err(Error::NonFinite {
                        step,
                        t: t_next,
                        detail: format!("chain {} diverged", chain.index),
                    });
                }
                *live = false;
                x.fill(f64::NAN);
            }
        }
    }
    Ok((xs, chains, alive))
}

/// Reverse-SDE sampling (Euler–Maruyama).
pub fn reverse_sde_sample(
    model: &dyn ScoreModel,
    y: Option<&[f64]>,
    n: usize,
    dim: usize,
    config: &SdeConfig,
    sched: &(impl Schedule + ?Sized),
) -> Result<SampleSet> {
    sample_chains(model, y, n, dim, config, sched, Integrator::ReverseSde)
}

/// Deterministic probability-flow sampling.
pub fn probability_flow_sample(
    model: &dyn ScoreModel,
    y: Option<&[f64]>,
    n: usize,
    dim: usize,
    config: &SdeConfig,
    sched: &(impl Schedule + ?Sized),
) -> Result<SampleSet> {
    sample_chains(model, y, n, dim, config, sched, Integrator::ProbabilityFlow)
}

/// Exact score of `N(μ0, σ0² I)` data pushed through the forward process.
#[derive(Debug, Clone)]
pub struct GaussianScore<S> {
    pub mean: Vec<f64>,
    pub var: f64,
    pub sched: S,
}

impl<S: Schedule> ScoreModel for GaussianScore<S> {
    fn state_dim(&self) -> usize {
        self.mean.len()
    }
    fn label_dim(&self) -> usize {
        0
    }
    fn score(
        &self,
        x: ArrayView1<f64>,
        t: f64,
        _y: Option<&[f64]>,
        _chain: &mut ChainState,
    ) -> Result<Array1<f64>> {
        let a = self.sched.alpha(t);
        let v = a * a * self.var + self.sched.beta2(t);
        Ok(Array1::from_shape_fn(x.len(), |k| -(x[k] - a * self.mean[k]) / v))
    }
}
