//! Diffusion maps for intrinsic coordinates and geometric harmonics for
//! lifting functions of those coordinates to new points.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, contract, Error, Result};
use crate::linalg::{
    cross_sq_dists, gaussian_kernel, median, median_offdiag, pairwise_sq_dists, solve, sym_eig,
    EigRange,
};

const DMAP_FORMAT: &str = "csgm-dmap";
const GH_FORMAT: &str = "csgm-geometric-harmonics";
const FORMAT_VERSION: u32 = 1;

/// Median pairwise squared distance times `scale`.
pub fn median_epsilon(x: ArrayView2<f64>, scale: f64) -> Result<f64> {
    if x.nrows() < 2 {
        return Err(contract("bandwidth heuristic needs at least two points"));
    }
    let eps = median_offdiag(&pairwise_sq_dists(x)) * scale;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(contract(format!("median heuristic gave a degenerate bandwidth {eps}")));
    }
    Ok(eps)
}

/// Gaussian kernel `A_ij = exp(−‖xᵢ − xⱼ‖² / (2ε))`.
pub fn kernel_matrix(x: ArrayView2<f64>, epsilon: f64) -> Array2<f64> {
    gaussian_kernel(&pairwise_sq_dists(x), epsilon)
}

/// Density-normalized kernel `Ā = P⁻¹ A P⁻¹` and its row sums.
fn density_normalized(mut a: Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let p: Vec<f64> = a.sum_axis(Axis(1)).to_vec();
    for ((i, j), v) in a.indexed_iter_mut() {
        *v /= p[i] * p[j];
    }
    let d = a.sum_axis(Axis(1)).to_vec();
    (a, d)
}

/// The row-stochastic diffusion operator `W = D⁻¹ Ā`.
pub fn markov_matrix(x: ArrayView2<f64>, epsilon: f64) -> Array2<f64> {
    let (mut a, d) = density_normalized(kernel_matrix(x, epsilon));
    for (i, mut row) in a.rows_mut().into_iter().enumerate() {
        row /= d[i];
    }
    a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmapEmbedding {
    pub format: String,
    pub version: u32,
    pub epsilon: f64,
    /// Descending; entry 0 is the trivial eigenvalue 1.
    pub eigenvalues: Array1<f64>,
    /// Column `k` is `φ_k`, scaled to unit mean square; column 0 is constant.
    pub eigenvectors: Array2<f64>,
    /// Indices (≥ 1) of the coordinates judged non-harmonic.
    pub selected: Vec<usize>,
    /// Local-linear-regression residual per eigenvector (entry 0 unused).
    pub residuals: Vec<f64>,
    pub train: Array2<f64>,
}

/// Top `k` non-trivial diffusion-map eigenpairs of `x`.
pub fn dmaps(x: ArrayView2<f64>, epsilon: f64, k: usize) -> Result<DmapEmbedding> {
    let n = x.nrows();
    if k == 0 || n < k + 1 {
        return Err(contract(format!("diffusion maps with k = {k} needs at least k + 1 points, got {n}")));
    }
    if !(epsilon > 0.0) {
        return Err(contract("kernel bandwidth must be positive"));
    }
    let (mut s, d) = density_normalized(kernel_matrix(x, epsilon));
    if d.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Eigen(format!("degenerate kernel row sums at epsilon = {epsilon:e}")));
    }
    let root: Vec<f64> = d.iter().map(|v| v.sqrt()).collect();
    for ((i, j), v) in s.indexed_iter_mut() {
        *v /= root[i] * root[j];
    }
    let (values, vecs) = sym_eig(s.view(), EigRange::Largest(k + 1))?;
    drop(s);
    let mut phi = vecs;
    for (i, mut row) in phi.rows_mut().into_iter().enumerate() {
        row /= root[i];
    }
    for mut col in phi.columns_mut() {
        let rms = (col.dot(&col) / n as f64).sqrt();
        col /= rms;
        fix_sign(col.view_mut());
    }
    Ok(DmapEmbedding {
        format: DMAP_FORMAT.into(),
        version: FORMAT_VERSION,
        epsilon,
        eigenvalues: values,
        eigenvectors: phi,
        selected: Vec::new(),
        residuals: Vec::new(),
        train: x.to_owned(),
    })
}

/// Flips the vector so that its largest-magnitude entry is positive.
fn fix_sign(mut v: ndarray::ArrayViewMut1<f64>) {
    let (mut best, mut at) = (0.0, 0);
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            at = i;
        }
    }
    if v[at] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
}

/// Leave-one-out local linear regression residual of `target` on `coords`,
/// normalized by the norm of `target`.
pub fn local_linear_residual(coords: ArrayView2<f64>, target: ArrayView1<f64>) -> Result<f64> {
    let n = coords.nrows();
    let d = coords.ncols();
    let sq = pairwise_sq_dists(coords);
    let mut dists: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(sq[[i, j]].sqrt());
        }
    }
    let bw = median(&mut dists) / 3.0;
    if !(bw > 0.0) {
        return Ok(1.0);
    }
    let mut err = 0.0;
    let p = d + 1;
    for i in 0..n {
        // Weighted normal equations for [1, x − xᵢ] → target, excluding i.
        let mut m = Array2::<f64>::zeros((p, p));
        let mut rhs = vec![0.0; p];
        let mut feat = vec![0.0; p];
        for j in 0..n {
            if j == i {
                continue;
            }
            let w = (-sq[[i, j]] / (bw * bw)).exp();
            if w < 1e-300 {
                continue;
            }
            feat[0] = 1.0;
            for k in 0..d {
                feat[k + 1] = coords[[j, k]] - coords[[i, k]];
            }
            for a in 0..p {
                rhs[a] += w * feat[a] * target[j];
                for b in 0..p {
                    m[[a, b]] += w * feat[a] * feat[b];
                }
            }
        }
        // Light ridge keeps isolated points solvable.
        let scale = m[[0, 0]].max(1e-300);
        for a in 0..p {
            m[[a, a]] += 1e-10 * scale;
        }
        let pred = match solve(m.view(), &rhs) {
            Ok(c) => c[0],
            Err(_) => 0.0,
        };
        err += (target[i] - pred).powi(2);
    }
    let norm = target.dot(&target);
    Ok((err / norm).sqrt())
}

/// Marks eigenvectors whose residual against the already-selected ones
/// exceeds `threshold`. The first non-trivial eigenvector is always kept.
pub fn select_nonharmonic(emb: &mut DmapEmbedding, threshold: f64) -> Result<Vec<usize>> {
    let k = emb.eigenvectors.ncols() - 1;
    let mut residuals = vec![0.0; k + 1];
    if k < 2 {
        log::warn!("only {k} candidate eigenvector(s); keeping all");
        emb.selected = (1..=k).collect();
        for r in residuals.iter_mut().skip(1) {
            *r = 1.0;
        }
        emb.residuals = residuals;
        return Ok(emb.selected.clone());
    }
    let mut selected = vec![1];
    residuals[1] = 1.0;
    for j in 2..=k {
        let coords = emb.eigenvectors.select(Axis(1), &selected);
        let r = local_linear_residual(coords.view(), emb.eigenvectors.column(j))?;
        residuals[j] = r;
        if r > threshold {
            selected.push(j);
        }
    }
    emb.selected = selected.clone();
    emb.residuals = residuals;
    Ok(selected)
}

impl DmapEmbedding {
    /// Non-trivial coordinates `φ_1 … φ_k` scaled by their eigenvalues.
    pub fn coordinates(&self, indices: &[usize]) -> Array2<f64> {
        let mut out = self.eigenvectors.select(Axis(1), indices);
        for (c, &i) in indices.iter().enumerate() {
            out.column_mut(c).mapv_inplace(|v| v * self.eigenvalues[i]);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::data::write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let e: DmapEmbedding = crate::data::read_json(path)?;
        check_format(&e.format, e.version, DMAP_FORMAT)?;
        Ok(e)
    }
}

fn check_format(format: &str, version: u32, want: &str) -> Result<()> {
    if format != want || version != FORMAT_VERSION {
        return Err(Error::Format(format!("expected {want} v{FORMAT_VERSION}, found {format} v{version}")));
    }
    Ok(())
}

/// Outcome of checking that two 2-D parametrizations are locally one-to-one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    /// Fraction of points whose local determinant exceeds `tolerance`.
    pub fraction_nonsingular: f64,
    pub min_abs_det: f64,
    pub median_abs_det: f64,
    /// `1e-2 × median |det|`.
    pub tolerance: f64,
}

/// Fits `b ≈ c + J (a − aᵢ)` over the `neighbors` nearest points (in `a`)
/// around every point and summarizes `|det J|`.
pub fn local_jacobian_check(a: ArrayView2<f64>, b: ArrayView2<f64>, neighbors: usize) -> Result<JacobianReport> {
    check_dim("jacobian check source columns", 2, a.ncols())?;
    check_dim("jacobian check target columns", 2, b.ncols())?;
    check_dim("jacobian check rows", a.nrows(), b.nrows())?;
    let n = a.nrows();
    if neighbors < 3 || n <= neighbors {
        return Err(contract("jacobian check needs more points than neighbors, and at least 3 neighbors"));
    }
    let sq = pairwise_sq_dists(a);
    let mut dets = Vec::with_capacity(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..n {
        let row = sq.row(i);
        idx.select_nth_unstable_by(neighbors, |&p, &q| row[p].total_cmp(&row[q]));
        let nb = &idx[..=neighbors];
        // Centered least squares: J = (Δb)ᵀ Δa (Δaᵀ Δa)⁻¹.
        let mean_a = a.select(Axis(0), nb).mean_axis(Axis(0)).expect("non-empty");
        let mean_b = b.select(Axis(0), nb).mean_axis(Axis(0)).expect("non-empty");
        let mut saa = [[0.0; 2]; 2];
        let mut sba = [[0.0; 2]; 2];
        for &j in nb {
            let da = [a[[j, 0]] - mean_a[0], a[[j, 1]] - mean_a[1]];
            let db = [b[[j, 0]] - mean_b[0], b[[j, 1]] - mean_b[1]];
            for r in 0..2 {
                for c in 0..2 {
                    saa[r][c] += da[r] * da[c];
                    sba[r][c] += db[r] * da[c];
                }
            }
        }
        let det_aa = saa[0][0] * saa[1][1] - saa[0][1] * saa[1][0];
        let det_ba = sba[0][0] * sba[1][1] - sba[0][1] * sba[1][0];
        dets.push(if det_aa.abs() > 0.0 { (det_ba / det_aa).abs() } else { 0.0 });
    }
    let min_abs_det = dets.iter().copied().fold(f64::INFINITY, f64::min);
    let median_abs_det = median(&mut dets.clone());
    let tolerance = 1e-2 * median_abs_det;
    let ok = dets.iter().filter(|d| **d > tolerance).count();
    Ok(JacobianReport {
        fraction_nonsingular: ok as f64 / n as f64,
        min_abs_det,
        median_abs_det,
        tolerance,
    })
}

/// Nyström-extension interpolant. The extension of every target column is
/// `Σ_α ⟨f, ψ_α⟩ σ_α⁻¹ Σⱼ k(x, xⱼ) ψ_α(j)`, which is stored collapsed into
/// `weights` so that evaluating at a new point is one kernel row times a matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GhInterpolant {
    pub format: String,
    pub version: u32,
    pub epsilon: f64,
    pub delta: f64,
    /// Retained eigenvalues, descending, all `> δ σ₀`.
    pub sigma: Vec<f64>,
    /// `⟨f, ψ_α⟩`, one row per retained eigenvalue, one column per target.
    pub coefficients: Array2<f64>,
    /// `Σ_α ψ_α ⟨f, ψ_α⟩ / σ_α`, N × p.
    pub weights: Array2<f64>,
    pub inputs: Array2<f64>,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
}

pub fn gh_fit(x_in: ArrayView2<f64>, f: ArrayView2<f64>, epsilon: f64, delta: f64) -> Result<GhInterpolant> {
    let n = x_in.nrows();
    check_dim("geometric harmonics target rows", n, f.nrows())?;
    if n < 2 {
        return Err(contract("geometric harmonics needs at least two training points"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(contract("spectral truncation ratio delta must lie in (0, 1)"));
    }
    if !(epsilon > 0.0) {
        return Err(contract("kernel bandwidth must be positive"));
    }
    let a = kernel_matrix(x_in, epsilon);
    // The Rayleigh quotient of the constant vector bounds σ₀ from below, so
    // every eigenvalue above δσ₀ is inside this range; filter exactly below.
    let rayleigh = a.sum() / n as f64;
    let (values, vecs) = sym_eig(a.view(), EigRange::Above(delta * rayleigh * (1.0 - 1e-12)))?;
    drop(a);
    if values.is_empty() {
        return Err(Error::Eigen("no kernel eigenvalue above the truncation bound".into()));
    }
    let sigma0 = values[0];
    let keep: Vec<usize> = (0..values.len()).filter(|&i| values[i] > delta * sigma0).collect();
    let psi = vecs.select(Axis(1), &keep);
    let sigma: Vec<f64> = keep.iter().map(|&i| values[i]).collect();
    let coefficients = psi.t().dot(&f);
    let mut scaled = coefficients.clone();
    for (r, mut row) in scaled.rows_mut().into_iter().enumerate() {
        row /= sigma[r];
    }
    let weights = psi.dot(&scaled);
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("geometric harmonics weights are not finite".into()));
    }
    Ok(GhInterpolant {
        format: GH_FORMAT.into(),
        version: FORMAT_VERSION,
        epsilon,
        delta,
        sigma,
        coefficients,
        weights,
        inputs: x_in.to_owned(),
        input_names: (0..x_in.ncols()).map(|i| format!("in{i}")).collect(),
        output_names: (0..f.ncols()).map(|i| format!("out{i}")).collect(),
    })
}

impl GhInterpolant {
    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn extend(&self, x_new: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(self.extend_batch(x_new.insert_axis(Axis(0)))?.row(0).to_owned())
    }

    pub fn extend_batch(&self, x_new: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("geometric harmonics input", self.input_dim(), x_new.ncols())?;
        let k = gaussian_kernel(&cross_sq_dists(x_new, self.inputs.view()), self.epsilon);
        Ok(k.dot(&self.weights))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::data::write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let g: GhInterpolant = crate::data::read_json(path)?;
        check_format(&g.format, g.version, GH_FORMAT)?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_points_give_unit_kernel() {
        let x = array![[1.0, 2.0], [1.0, 2.0]];
        assert!(kernel_matrix(x.view(), 0.3).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn trivial_mode_is_constant() {
        let x = Array2::from_shape_fn((30, 1), |(i, _)| (i as f64 * 0.37).sin());
        let emb = dmaps(x.view(), 0.1, 3).unwrap();
        assert!((emb.eigenvalues[0] - 1.0).abs() < 1e-8);
        assert!(emb.eigenvectors.column(0).iter().all(|v| (v - 1.0).abs() < 1e-8));
        assert!(emb.eigenvalues.iter().all(|v| *v > -1e-8 && *v < 1.0 + 1e-8));
    }

    #[test]
    fn too_few_points_is_an_error() {
        let x = array![[0.0], [1.0]];
        assert!(dmaps(x.view(), 1.0, 2).is_err());
        assert!(gh_fit(x.view(), x.view(), 1.0, 1.5).is_err());
    }

    #[test]
    fn jacobian_of_linear_map_is_constant() {
        let a = Array2::from_shape_fn((100, 2), |(i, j)| if j == 0 { (i % 10) as f64 } else { (i / 10) as f64 });
        let b = Array2::from_shape_fn((100, 2), |(i, j)| if j == 0 { 2.0 * a[[i, 0]] + a[[i, 1]] } else { a[[i, 1]] - a[[i, 0]] });
        let r = local_jacobian_check(a.view(), b.view(), 6).unwrap();
        assert!((r.min_abs_det - 3.0).abs() < 1e-9 && r.fraction_nonsingular == 1.0, "{r:?}");
    }
}
