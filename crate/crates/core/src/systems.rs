//! Data generators and ground-truth oracles: the cusp surface, a Galerkin
//! truncation of the Chafee–Infante equation, and a tubular reactor with
//! axial dispersion.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{names, SampleSet};
use crate::error::{contract, Error, Result};
use crate::linalg::solve;
use crate::sde::chain_rng;

// ---------------------------------------------------------------------------
// Cusp

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LambdaDist {
    Uniform,
    /// Equal-weight normal mixture, truncated to the λ range by rejection.
    GaussianMixture { modes: Vec<f64>, sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CuspSpec {
    pub n_samples: usize,
    pub x_range: [f64; 2],
    pub lambda_range: [f64; 2],
    pub lambda_dist: LambdaDist,
}

impl Default for CuspSpec {
    fn default() -> Self {
        Self {
            n_samples: 20_000,
            x_range: [-2.0, 2.0],
            lambda_range: [-2.5, 2.5],
            lambda_dist: LambdaDist::Uniform,
        }
    }
}

impl CuspSpec {
    pub fn bimodal() -> Self {
        Self {
            lambda_dist: LambdaDist::GaussianMixture {
                modes: vec![-1.0, 1.0],
                sigma: 0.5,
            },
            ..Self::default()
        }
    }
}

/// Points `(x, λ, μ)` on the surface `μ = x³ − λx`, all as state columns.
pub fn cusp_sample(spec: &CuspSpec, seed: u64) -> Result<SampleSet> {
    if spec.n_samples == 0 {
        return Err(contract("cusp sample count must be positive"));
    }
    let [x_lo, x_hi] = spec.x_range;
    let [l_lo, l_hi] = spec.lambda_range;
    if !(x_lo < x_hi && l_lo < l_hi) {
        return Err(contract("cusp ranges must be increasing intervals"));
    }
    let mut rng = chain_rng(seed, 0);
    let mixture = match &spec.lambda_dist {
        LambdaDist::Uniform => None,
        LambdaDist::GaussianMixture { modes, sigma } => {
            if modes.is_empty() || !(*sigma > 0.0) {
                return Err(contract("mixture needs at least one mode and a positive sigma"));
            }
            let comps: Vec<Normal<f64>> = modes
                .iter()
                .map(|m| Normal::new(*m, *sigma).map_err(|e| contract(e.to_string())))
                .collect::<Result<_>>()?;
            Some(comps)
        }
    };
    let mut out = Array2::zeros((spec.n_samples, 3));
    for mut row in out.rows_mut() {
        let x = rng.random_range(x_lo..x_hi);
        let lambda = match &mixture {
            None => rng.random_range(l_lo..l_hi),
            Some(comps) => loop {
                let c = &comps[rng.random_range(0..comps.len())];
                let v = c.sample(&mut rng);
                if (l_lo..=l_hi).contains(&v) {
                    break v;
                }
            },
        };
        row[0] = x;
        row[1] = lambda;
        row[2] = x * x * x - lambda * x;
    }
    SampleSet::new(out, names(&["x", "lambda", "mu"]))
}

/// Real roots of `−x³ + λx + μ = 0`, ascending, without repeats.
pub fn cusp_roots(lambda: f64, mu: f64) -> Vec<f64> {
    // x³ + p x + q = 0 with p = −λ, q = −μ.
    let p = -lambda;
    let q = -mu;
    let disc = -(4.0 * p * p * p + 27.0 * q * q);
    let mut roots = if disc > 0.0 {
        let r = 2.0 * (-p / 3.0).sqrt();
        let arg = ((3.0 * q) / (p * r)).clamp(-1.0, 1.0);
        let phi = arg.acos() / 3.0;
        (0..3)
            .map(|k| r * (phi - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos())
            .collect::<Vec<_>>()
    } else if disc == 0.0 && p != 0.0 {
        vec![3.0 * q / p, -1.5 * q / p]
    } else {
        let s = (q * q / 4.0 + p * p * p / 27.0).sqrt();
        vec![(-q / 2.0 + s).cbrt() + (-q / 2.0 - s).cbrt()]
    };
    for r in roots.iter_mut() {
        for _ in 0..3 {
            let f = *r * *r * *r + p * *r + q;
            let df = 3.0 * *r * *r + p;
            if df.abs() > 1e-14 {
                *r -= f / df;
            }
        }
    }
    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    roots
}

// ---------------------------------------------------------------------------
// Chafee–Infante Galerkin system

/// `u_t = u − u³ + ν u_xx` on `[0, π]` with Dirichlet ends, projected onto
/// `sin(kx)`, `k = 1..n_modes`. The cubic term is evaluated on the interior
/// sine-transform grid `x_j = jπ/G`; the quadrature is exact when `G > 2K`,
/// since `u³ sin(kx)` then has no frequency the grid aliases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiGalerkin {
    pub nu: f64,
    pub n_modes: usize,
    pub grid: usize,
    /// `sin(k x_j)`, grid points by modes.
    #[serde(skip)]
    basis: Array2<f64>,
}

impl CiGalerkin {
    pub fn new(nu: f64, n_modes: usize, grid: usize) -> Result<Self> {
        if n_modes == 0 {
            return Err(contract("need at least one Galerkin mode"));
        }
        if grid <= 2 * n_modes {
            return Err(contract(format!(
                "quadrature grid {grid} aliases the cubic term; need more than {}",
                2 * n_modes
            )));
        }
        let basis = Array2::from_shape_fn((grid - 1, n_modes), |(j, k)| {
            ((k + 1) as f64 * (j + 1) as f64 * std::f64::consts::PI / grid as f64).sin()
        });
        Ok(Self {
            nu,
            n_modes,
            grid,
            basis,
        })
    }

    /// `(2/π) ∫₀^π u³ sin(kx) dx` for every mode.
    pub fn cubic_projection(&self, alpha: &[f64]) -> Vec<f64> {
        let a = Array1::from(alpha.to_vec());
        let u = self.basis.dot(&a);
        let u3 = u.mapv(|v| v * v * v);
        let proj = self.basis.t().dot(&u3);
        proj.iter().map(|v| v * 2.0 / self.grid as f64).collect()
    }

    pub fn rhs(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        if alpha.len() != self.n_modes {
            return Err(Error::Dimension {
                context: "Galerkin state",
                expected: self.n_modes,
                got: alpha.len(),
            });
        }
        let cubic = self.cubic_projection(alpha);
        Ok((0..self.n_modes)
            .map(|k| {
                let kk = (k + 1) as f64;
                (1.0 - self.nu * kk * kk) * alpha[k] - cubic[k]
            })
            .collect())
    }

    pub fn rk4_step(&self, alpha: &[f64], dt: f64) -> Result<Vec<f64>> {
        let add = |a: &[f64], b: &[f64], s: f64| a.iter().zip(b).map(|(x, y)| x + s * y).collect::<Vec<_>>();
        let k1 = self.rhs(alpha)?;
        let k2 = self.rhs(&add(alpha, &k1, dt / 2.0))?;
        let k3 = self.rhs(&add(alpha, &k2, dt / 2.0))?;
        let k4 = self.rhs(&add(alpha, &k3, dt))?;
        Ok((0..alpha.len())
            .map(|k| alpha[k] + dt / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]))
            .collect())
    }
}

impl Default for CiGalerkin {
    fn default() -> Self {
        Self::new(0.16, 10, 32).expect("valid defaults")
    }
}

/// Right-hand side of the default 10-mode system (ν = 0.16).
pub fn ci_rhs(alpha: &[f64]) -> Result<Vec<f64>> {
    CiGalerkin::default().rhs(alpha)
}

/// `u(x) = Σ α_k sin(kx)` at each `x`.
pub fn ci_profile(alpha: &[f64], xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|x| {
            alpha
                .iter()
                .enumerate()
                .map(|(k, a)| a * ((k + 1) as f64 * x).sin())
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CiTrajectoryConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Time discarded at the start of every trajectory.
    pub burn_in: f64,
    /// Arclength between recorded snapshots.
    pub spacing: f64,
    /// A trajectory stops once `‖f(α)‖` falls below this (it has reached a
    /// steady state and adds no new manifold points).
    pub slow_threshold: f64,
}

impl Default for CiTrajectoryConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            t_end: 60.0,
            burn_in: 2.0,
            spacing: 0.02,
            slow_threshold: 1e-3,
        }
    }
}

/// Integrates from `alpha0` and returns snapshots spaced by arclength.
pub fn ci_integrate(sys: &CiGalerkin, alpha0: &[f64], cfg: &CiTrajectoryConfig) -> Result<Vec<Vec<f64>>> {
    if !(cfg.dt > 0.0 && cfg.t_end > 0.0 && cfg.spacing > 0.0) {
        return Err(contract("integration step, horizon and spacing must be positive"));
    }
    let mut a = alpha0.to_vec();
    let mut t = 0.0;
    let mut snaps = Vec::new();
    let mut since_last = f64::INFINITY;
    let steps = (cfg.t_end / cfg.dt).ceil() as usize;
    for step in 0..steps {
        let next = sys.rk4_step(&a, cfg.dt)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step,
                t,
                detail: "Galerkin trajectory diverged".into(),
            });
        }
        let ds: f64 = next.iter().zip(&a).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        a = next;
        t += cfg.dt;
        if t < cfg.burn_in {
            continue;
        }
        since_last += ds;
        if since_last >= cfg.spacing {
            snaps.push(a.clone());
            since_last = 0.0;
        }
        let speed: f64 = sys.rhs(&a)?.iter().map(|v| v * v).sum::<f64>().sqrt();
        if speed < cfg.slow_threshold {
            break;
        }
    }
    Ok(snaps)
}

/// Random initial condition near the origin. `α₁` is log-distributed so that
/// some trajectories first follow the `α₂` direction toward the mode-2 saddles
/// before turning to the stable mode-1 states.
pub fn ci_initial_condition(n_modes: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut a = vec![0.0; n_modes];
    let sign = |rng: &mut dyn rand::RngCore| if rng.random::<bool>() { 1.0 } else { -1.0 };
    a[0] = sign(rng) * 10f64.powf(rng.random_range(-7.0..-1.3));
    if n_modes > 1 {
        a[1] = rng.random_range(-0.05..0.05);
    }
    for v in a.iter_mut().skip(2) {
        *v = rng.random_range(-0.02..0.02);
    }
    a
}

/// Post-transient snapshots from `n_init` trajectories, columns `a1..aK`.
pub fn ci_dataset(sys: &CiGalerkin, n_init: usize, seed: u64, cfg: &CiTrajectoryConfig) -> Result<SampleSet> {
    if n_init == 0 {
        return Err(contract("need at least one initial condition"));
    }
    let runs: Vec<Result<Vec<Vec<f64>>>> = (0..n_init)
        .into_par_iter()
        .map(|i| {
            let mut rng = chain_rng(seed, i as u64);
            let a0 = ci_initial_condition(sys.n_modes, &mut rng);
            ci_integrate(sys, &a0, cfg)
        })
        .collect();
    let mut rows = Vec::new();
    for r in runs {
        rows.extend(r?);
    }
    if rows.is_empty() {
        return Err(contract("no post-transient snapshots were recorded"));
    }
    let k = sys.n_modes;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let n = flat.len() / k;
    let cols: Vec<String> = (1..=k).map(|i| format!("a{i}")).collect();
    SampleSet::new(Array2::from_shape_vec((n, k), flat).map_err(|e| contract(e.to_string()))?, cols)
}

// ---------------------------------------------------------------------------
// Tubular reactor with axial dispersion

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfrSpec {
    pub pe: f64,
    pub da: f64,
    pub b: f64,
    pub beta: f64,
    pub gamma: f64,
    pub n_z: usize,
}

impl Default for PfrSpec {
    fn default() -> Self {
        Self {
            pe: 5.0,
            da: 0.06,
            b: 12.0,
            beta: 0.5,
            gamma: 20.0,
            n_z: 200,
        }
    }
}

impl PfrSpec {
    fn dz(&self) -> f64 {
        1.0 / (self.n_z - 1) as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.n_z).map(|i| i as f64 * self.dz()).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.n_z < 3 {
            return Err(contract("reactor grid needs at least 3 nodes"));
        }
        if !(self.pe > 0.0 && self.gamma > 0.0) {
            return Err(contract("Peclet number and activation ratio must be positive"));
        }
        Ok(())
    }
}

/// Reaction rate `(1 − x₁) exp(x₂ / (1 + x₂/γ))` and its partials in x₁, x₂.
fn rate(x1: f64, x2: f64, gamma: f64) -> (f64, f64, f64) {
    let den = 1.0 + x2 / gamma;
    let e = (x2 / den).exp();
    (
        (1.0 - x1) * e,
        -e,
        (1.0 - x1) * e / (den * den),
    )
}

/// Neighbor values for node `i` after eliminating ghost nodes: returns the
/// coefficients of `(x_{i−1}, x_i, x_{i+1})` in the discrete operator
/// `(1/Pe) x'' − x'`, with the ghost nodes folded in.
fn transport_stencil(spec: &PfrSpec, i: usize) -> [(Option<usize>, f64); 3] {
    let n = spec.n_z;
    let h = spec.dz();
    let d2 = 1.0 / (spec.pe * h * h);
    let d1 = 1.0 / (2.0 * h);
    if i == 0 {
        // Inlet ghost: x₋₁ = x₁ − 2h Pe x₀.
        [
            (None, 0.0),
            (Some(0), -2.0 * d2 + (d2 + d1) * (-2.0 * h * spec.pe)),
            (Some(1), 2.0 * d2),
        ]
    } else if i == n - 1 {
        // Outlet ghost: x_n = x_{n−2}.
        [(Some(n - 2), 2.0 * d2), (Some(n - 1), -2.0 * d2), (None, 0.0)]
    } else {
        [(Some(i - 1), d2 + d1), (Some(i), -2.0 * d2), (Some(i + 1), d2 - d1)]
    }
}

/// `(1/Pe) x'' − x'` at node `i`, written in neighbor differences so the
/// large `1/h²` factor multiplies small numbers (keeps the roundoff floor of
/// the residual well below 1e-10).
fn transport(spec: &PfrSpec, x: &[f64], i: usize) -> f64 {
    let n = spec.n_z;
    let h = spec.dz();
    let d2 = 1.0 / (spec.pe * h * h);
    if i == 0 {
        d2 * (2.0 * (x[1] - x[0]) - 2.0 * h * spec.pe * x[0]) - spec.pe * x[0]
    } else if i == n - 1 {
        d2 * 2.0 * (x[n - 2] - x[n - 1])
    } else {
        d2 * ((x[i - 1] - x[i]) + (x[i + 1] - x[i])) - (x[i + 1] - x[i - 1]) / (2.0 * h)
    }
}

/// Method-of-lines time derivative of `[x₁(z₀..), x₂(z₀..)]`.
pub fn pfr_rhs(state: &[f64], spec: &PfrSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let n = spec.n_z;
    if state.len() != 2 * n {
        return Err(Error::Dimension {
            context: "reactor state",
            expected: 2 * n,
            got: state.len(),
        });
    }
    let (x1, x2) = state.split_at(n);
    let mut out = vec![0.0; 2 * n];
    for i in 0..n {
        let (r, _, _) = rate(x1[i], x2[i], spec.gamma);
        let t1 = transport(spec, x1, i);
        let t2 = transport(spec, x2, i);
        out[i] = t1 + spec.da * r;
        out[n + i] = t2 - spec.beta * x2[i] + spec.b * spec.da * r;
    }
    Ok(out)
}

/// Jacobian of [`pfr_rhs`] in the state, and its derivative in Da.
fn pfr_jacobian(state: &[f64], spec: &PfrSpec) -> (Array2<f64>, Vec<f64>) {
    let n = spec.n_z;
    let (x1, x2) = state.split_at(n);
    let mut jac = Array2::zeros((2 * n, 2 * n));
    let mut d_da = vec![0.0; 2 * n];
    for i in 0..n {
        for (j, c) in transport_stencil(spec, i) {
            if let Some(j) = j {
                jac[[i, j]] += c;
                jac[[n + i, n + j]] += c;
            }
        }
        let (r, r1, r2) = rate(x1[i], x2[i], spec.gamma);
        jac[[i, i]] += spec.da * r1;
        jac[[i, n + i]] += spec.da * r2;
        jac[[n + i, i]] += spec.b * spec.da * r1;
        jac[[n + i, n + i]] += spec.b * spec.da * r2 - spec.beta;
        d_da[i] = r;
        d_da[n + i] = spec.b * r;
    }
    (jac, d_da)
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Damped Newton on the steady equations at fixed Da.
pub fn pfr_newton(spec: &PfrSpec, guess: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let mut x = guess.to_vec();
    let mut res = pfr_rhs(&x, spec)?;
    for _ in 0..max_iter {
        let norm = max_norm(&res);
        if norm < tol {
            return Ok(polish(spec, x, norm));
        }
        let (jac, _) = pfr_jacobian(&x, spec);
        let neg: Vec<f64> = res.iter().map(|v| -v).collect();
        let dx = solve(jac.view(), &neg)?;
        let mut step = 1.0;
        loop {
            let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a + step * d).collect();
            let r = pfr_rhs(&trial, spec)?;
            if max_norm(&r) < norm || step < 1e-4 {
                x = trial;
                res = r;
                break;
            }
            step *= 0.5;
        }
        if x.iter().any(|v| !v.is_finite()) {
            break;
        }
    }
    let norm = max_norm(&res);
    if norm < tol {
        Ok(x)
    } else {
        Err(Error::Convergence(format!(
            "Newton did not reach residual {tol:e} (last {norm:e}) at Da = {}",
            spec.da
        )))
    }
}

/// Two extra undamped Newton steps, kept only while they lower the residual.
fn polish(spec: &PfrSpec, mut x: Vec<f64>, mut norm: f64) -> Vec<f64> {
    for _ in 0..2 {
        let Ok(res) = pfr_rhs(&x, spec) else { break };
        let (jac, _) = pfr_jacobian(&x, spec);
        let neg: Vec<f64> = res.iter().map(|v| -v).collect();
        let Ok(dx) = solve(jac.view(), &neg) else { break };
        let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a + d).collect();
        match pfr_rhs(&trial, spec) {
            Ok(r) if max_norm(&r) < norm => {
                norm = max_norm(&r);
                x = trial;
            }
            _ => break,
        }
    }
    x
}

/// A point on the traced solution curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub da: f64,
    pub state: Vec<f64>,
}

impl TracePoint {
    pub fn inlet_conversion(&self) -> f64 {
        self.state[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuationConfig {
    pub da_max: f64,
    /// Initial arclength step in scaled units (RMS state, Da / `da_scale`).
    pub step: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub da_scale: f64,
    pub max_points: usize,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            da_max: 0.3,
            step: 0.02,
            min_step: 1e-5,
            max_step: 0.2,
            da_scale: 0.01,
            max_points: 20_000,
        }
    }
}

/// Pseudo-arclength continuation of the steady states in Da, starting from
/// the trivial state at Da = 0 and stopping once Da exceeds `da_max` (or
/// turns below zero).
pub fn pfr_trace(spec: &PfrSpec, cfg: &ContinuationConfig) -> Result<Vec<TracePoint>> {
    spec.validate()?;
    let n2 = 2 * spec.n_z;
    let su = (n2 as f64).sqrt();
    let sp = cfg.da_scale;
    // Scaled unknowns: w = (u / su, Da / sp).
    let mut at = PfrSpec { da: 0.0, ..spec.clone() };
    let mut u = vec![0.0; n2];
    let mut tangent = initial_tangent(&u, &at, su, sp)?;
    let mut points = vec![TracePoint { da: 0.0, state: u.clone() }];
    let mut ds = cfg.step;
    while points.len() < cfg.max_points {
        let pred_u: Vec<f64> = u.iter().zip(&tangent[..n2]).map(|(x, t)| x + ds * t * su).collect();
        let pred_da = at.da + ds * tangent[n2] * sp;
        match correct(&pred_u, pred_da, &tangent, spec, su, sp) {
            Ok((new_u, new_da, iters)) => {
                let new_spec = PfrSpec { da: new_da, ..spec.clone() };
                let new_t = next_tangent(&new_u, &new_spec, &tangent, su, sp)?;
                u = new_u;
                at = new_spec;
                tangent = new_t;
                points.push(TracePoint { da: at.da, state: u.clone() });
                if at.da > cfg.da_max || at.da < 0.0 {
                    break;
                }
                if iters <= 3 {
                    ds = (ds * 1.5).min(cfg.max_step);
                }
            }
            Err(_) => {
                ds *= 0.5;
                if ds < cfg.min_step {
                    return Err(Error::Convergence(format!(
                        "continuation stalled near Da = {:.5} after {} points",
                        at.da,
                        points.len()
                    )));
                }
            }
        }
    }
    Ok(points)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= n;
    }
}

fn initial_tangent(u: &[f64], spec: &PfrSpec, su: f64, sp: f64) -> Result<Vec<f64>> {
    let (jac, d_da) = pfr_jacobian(u, spec);
    let neg: Vec<f64> = d_da.iter().map(|v| -v).collect();
    let du = solve(jac.view(), &neg)?;
    // du is ∂u/∂Da; in scaled units the direction is (du·sp/su, 1).
    let mut t: Vec<f64> = du.iter().map(|v| v * sp / su).collect();
    t.push(1.0);
    normalize(&mut t);
    Ok(t)
}

/// Bordered system `[J_w; τᵀ] t = [0; 1]` in scaled unknowns.
fn next_tangent(u: &[f64], spec: &PfrSpec, prev: &[f64], su: f64, sp: f64) -> Result<Vec<f64>> {
    let n2 = u.len();
    let (jac, d_da) = pfr_jacobian(u, spec);
    let mut m = Array2::zeros((n2 + 1, n2 + 1));
    for i in 0..n2 {
        for j in 0..n2 {
            m[[i, j]] = jac[[i, j]] * su;
        }
        m[[i, n2]] = d_da[i] * sp;
    }
    for j in 0..=n2 {
        m[[n2, j]] = prev[j];
    }
    let mut rhs = vec![0.0; n2 + 1];
    rhs[n2] = 1.0;
    let mut t = solve(m.view(), &rhs)?;
    normalize(&mut t);
    Ok(t)
}

/// Newton on `F(u, Da) = 0` plus the hyperplane `τ·(w − w_pred) = 0`.
fn correct(
    pred_u: &[f64],
    pred_da: f64,
    tangent: &[f64],
    spec: &PfrSpec,
    su: f64,
    sp: f64,
) -> Result<(Vec<f64>, f64, usize)> {
    let n2 = pred_u.len();
    let mut u = pred_u.to_vec();
    let mut da = pred_da;
    for iter in 1..=12 {
        let s = PfrSpec { da, ..spec.clone() };
        let f = pfr_rhs(&u, &s)?;
        let plane: f64 = (0..n2).map(|i| tangent[i] * (u[i] - pred_u[i]) / su).sum::<f64>()
            + tangent[n2] * (da - pred_da) / sp;
        if max_norm(&f) < 1e-10 && plane.abs() < 1e-12 {
            return Ok((u, da, iter));
        }
        let (jac, d_da) = pfr_jacobian(&u, &s);
        let mut m = Array2::zeros((n2 + 1, n2 + 1));
        for i in 0..n2 {
            for j in 0..n2 {
                m[[i, j]] = jac[[i, j]];
            }
            m[[i, n2]] = d_da[i];
        }
        for j in 0..n2 {
            m[[n2, j]] = tangent[j] / su;
        }
        m[[n2, n2]] = tangent[n2] / sp;
        let mut rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        rhs.push(-plane);
        let d = solve(m.view(), &rhs)?;
        for i in 0..n2 {
            u[i] += d[i];
        }
        da += d[n2];
        if !da.is_finite() || u.iter().any(|v| !v.is_finite()) {
            break;
        }
    }
    Err(Error::Convergence("arclength corrector did not converge".into()))
}

/// Da values where the traced curve turns back (folds), located by
/// inverse quadratic interpolation of Da through three trace points.
pub fn pfr_folds(trace: &[TracePoint]) -> Vec<f64> {
    let mut folds = Vec::new();
    for w in trace.windows(3) {
        let (a, b, c) = (w[0].da, w[1].da, w[2].da);
        if (b - a) * (c - b) < 0.0 {
            // Parabola through (−1, a), (0, b), (1, c) in the step index.
            let curv = a - 2.0 * b + c;
            let s = if curv.abs() > 0.0 { (a - c) / (2.0 * curv) } else { 0.0 };
            folds.push(b + 0.5 * (c - a) * s + 0.5 * curv * s * s);
        }
    }
    folds
}

/// Steady profiles at a fixed Da.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub da: f64,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub residual: f64,
}

impl SteadyState {
    pub fn inlet_conversion(&self) -> f64 {
        self.x1[0]
    }
}

/// Crossings of `da` along a trace, refined by Newton at fixed Da.
fn crossings(trace: &[TracePoint], spec: &PfrSpec) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for w in trace.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if (a.da - spec.da) * (b.da - spec.da) <= 0.0 && a.da != b.da {
            let f = (spec.da - a.da) / (b.da - a.da);
            let guess: Vec<f64> = a.state.iter().zip(&b.state).map(|(p, q)| p + f * (q - p)).collect();
            if let Ok(s) = pfr_newton(spec, &guess, 1e-10, 40) {
                out.push(s);
            }
        }
    }
    out
}

fn dedup_states(states: Vec<Vec<f64>>, spec: &PfrSpec) -> Vec<SteadyState> {
    let n = spec.n_z;
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for s in states {
        if !kept.iter().any(|k| max_norm(&k.iter().zip(&s).map(|(a, b)| a - b).collect::<Vec<_>>()) < 1e-6) {
            kept.push(s);
        }
    }
    kept.sort_by(|a, b| a[0].total_cmp(&b[0]));
    kept.into_iter()
        .map(|s| {
            let residual = max_norm(&pfr_rhs(&s, spec).expect("sized"));
            SteadyState {
                da: spec.da,
                x1: s[..n].to_vec(),
                x2: s[n..].to_vec(),
                residual,
            }
        })
        .collect()
}

/// All steady states at `spec.da`: crossings of the continuation curve, plus
/// Newton from a bank of flat initial profiles; de-duplicated and verified.
pub fn pfr_steady_states(spec: &PfrSpec) -> Result<Vec<SteadyState>> {
    let cfg = ContinuationConfig {
        da_max: (2.0 * spec.da).max(0.3),
        ..Default::default()
    };
    let trace = pfr_trace(&PfrSpec { da: 0.0, ..spec.clone() }, &cfg)?;
    steady_states_from_trace(&trace, spec)
}

pub fn steady_states_from_trace(trace: &[TracePoint], spec: &PfrSpec) -> Result<Vec<SteadyState>> {
    let n = spec.n_z;
    let mut found = crossings(trace, spec);
    for c in [0.0, 0.2, 0.5, 0.8, 0.95, 0.999] {
        let t2 = spec.b * c / (1.0 + spec.beta);
        let mut guess = vec![c; n];
        guess.extend(std::iter::repeat_n(t2, n));
        if let Ok(s) = pfr_newton(spec, &guess, 1e-10, 60) {
            found.push(s);
        }
    }
    let states = dedup_states(found, spec);
    for s in &states {
        if !(s.residual < 1e-10) {
            return Err(Error::Convergence(format!("steady state residual {:e} above 1e-10", s.residual)));
        }
    }
    Ok(states)
}

/// Steady states over a grid of Da values, one row per state, with columns
/// `x1_0`, `x2_0` (inlet values) and label `da`; full profiles alongside.
#[derive(Debug, Clone)]
pub struct PfrDataset {
    pub set: SampleSet,
    /// Row `i` holds `[x₁(z), x₂(z)]` for row `i` of `set`.
    pub profiles: Array2<f64>,
    pub branch: Vec<usize>,
}

pub fn pfr_dataset(da_grid: &[f64], spec: &PfrSpec) -> Result<PfrDataset> {
    if da_grid.is_empty() {
        return Err(contract("Da grid is empty"));
    }
    let da_max = da_grid.iter().copied().fold(0.0, f64::max);
    let cfg = ContinuationConfig {
        da_max: (1.5 * da_max).max(0.3),
        ..Default::default()
    };
    let trace = pfr_trace(&PfrSpec { da: 0.0, ..spec.clone() }, &cfg)?;
    let per_da: Vec<Result<Vec<SteadyState>>> = da_grid
        .par_iter()
        .map(|&da| {
            let s = PfrSpec { da, ..spec.clone() };
            Ok(dedup_states(crossings(&trace, &s), &s))
        })
        .collect();
    let n = spec.n_z;
    let mut rows = Vec::new();
    let mut profiles = Vec::new();
    let mut branch = Vec::new();
    for r in per_da {
        for (b, s) in r?.into_iter().enumerate() {
            rows.extend([s.x1[0], s.x2[0], s.da]);
            profiles.extend(s.x1.iter().chain(&s.x2));
            branch.push(b);
        }
    }
    let m = branch.len();
    if m == 0 {
        return Err(contract("no steady states found on the Da grid"));
    }
    let all = Array2::from_shape_vec((m, 3), rows).map_err(|e| contract(e.to_string()))?;
    let set = SampleSet::new(all, names(&["x1_0", "x2_0", "da"]))?;
    Ok(PfrDataset {
        set,
        profiles: Array2::from_shape_vec((m, 2 * n), profiles).map_err(|e| contract(e.to_string()))?,
        branch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cusp_roots_examples() {
        let r = cusp_roots(2.0, 0.0);
        let s2 = 2f64.sqrt();
        assert_eq!(r.len(), 3);
        for (a, b) in r.iter().zip([-s2, 0.0, s2]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(cusp_roots(-1.0, 0.0), vec![0.0]);
        assert_eq!(cusp_roots(0.0, 0.0).len(), 1);
    }

    #[test]
    fn cusp_rows_lie_on_surface() {
        let set = cusp_sample(&CuspSpec { n_samples: 500, ..CuspSpec::bimodal() }, 3).unwrap();
        for r in set.states.rows() {
            assert_eq!(r[2], r[0] * r[0] * r[0] - r[1] * r[0]);
            assert!((-2.5..=2.5).contains(&r[1]));
        }
    }

    #[test]
    fn ci_origin_is_fixed() {
        assert!(ci_rhs(&[0.0; 10]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn aliasing_grid_rejected() {
        assert!(CiGalerkin::new(0.16, 10, 20).is_err());
    }

    #[test]
    fn reactor_without_reaction_stays_at_zero() {
        let spec = PfrSpec { da: 0.0, n_z: 50, ..Default::default() };
        let states = steady_states_from_trace(&[], &spec).unwrap();
        assert_eq!(states.len(), 1);
        assert!(states[0].x1.iter().chain(&states[0].x2).all(|v| v.abs() < 1e-12));
    }
}
