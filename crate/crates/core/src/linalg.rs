//! Dense linear algebra (symmetric eigenpairs, general solves) on top of
//! faer, plus kernel helpers shared by the manifold code.

use faer::{Mat, Side};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Which part of the spectrum to request from [`sym_eig`].
#[derive(Debug, Clone, Copy)]
pub enum EigRange {
    /// The `k` largest eigenvalues.
    Largest(usize),
    /// All eigenvalues strictly greater than the bound.
    Above(f64),
    All,
}

fn to_faer(a: ArrayView2<f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
/// Column `i` of the returned vectors pairs with `values[i]`.
pub fn sym_eig(a: ArrayView2<f64>, range: EigRange) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Eigen(format!("matrix is {}x{}, not square", n, a.ncols())));
    }
    if n == 0 {
        return Ok((Array1::zeros(0), Array2::zeros((0, 0))));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("matrix has non-finite entries".into()));
    }
    let evd = to_faer(a).self_adjoint_eigen(Side::Lower).map_err(|e| {
        Error::Eigen(format!(
            "symmetric eigensolver failed on a {n}x{n} matrix (max |a| = {:.3e}): {e:?}",
            a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
        ))
    })?;
    let (u, s) = (evd.U(), evd.S());
    // Ascending from the solver; walk it backwards.
    let order: Vec<usize> = (0..n).rev().collect();
    let keep: Vec<usize> = match range {
        EigRange::Largest(k) => order.into_iter().take(k.min(n)).collect(),
        EigRange::Above(bound) => order.into_iter().filter(|&i| s[i] > bound).collect(),
        EigRange::All => order,
    };
    let values = Array1::from_iter(keep.iter().map(|&i| s[i]));
    let vectors = Array2::from_shape_fn((n, keep.len()), |(r, c)| u[(r, keep[c])]);
    Ok((values, vectors))
}

/// Solves `a x = b` for square `a` (LU with partial pivoting).
pub fn solve(a: ArrayView2<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::Solve(format!(
            "shape mismatch: a is {}x{}, b has {}",
            n,
            a.ncols(),
            b.len()
        )));
    }
    let lu = to_faer(a).partial_piv_lu();
    let rhs = Mat::from_fn(n, 1, |i, _| b[i]);
    let x = faer::linalg::solvers::Solve::solve(&lu, &rhs);
    let out: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solve("matrix is singular to working precision".into()));
    }
    Ok(out)
}

/// Squared Euclidean distances between all rows of `x`; exactly symmetric
/// with a zero diagonal.
pub fn pairwise_sq_dists(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r)).collect();
    let gram = x.dot(&x.t());
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (norms[i] + norms[j] - 2.0 * gram[[i, j]]).max(0.0);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Squared distances from every row of `a` to every row of `b`.
pub fn cross_sq_dists(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let na: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let nb: Vec<f64> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut d = a.dot(&b.t());
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (na[i] + nb[j] - 2.0 * *v).max(0.0);
    }
    d
}

/// Gaussian kernel `exp(-d² / (2 eps))` applied elementwise to squared distances.
pub fn gaussian_kernel(sq_dists: &Array2<f64>, eps: f64) -> Array2<f64> {
    sq_dists.mapv(|d| (-d / (2.0 * eps)).exp())
}

/// Median of the off-diagonal upper-triangle entries.
pub fn median_offdiag(d: &Array2<f64>) -> f64 {
    let n = d.nrows();
    let mut vals = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            vals.push(d[[i, j]]);
        }
    }
    median(&mut vals)
}

pub fn median(vals: &mut [f64]) -> f64 {
    if vals.is_empty() {
        return f64::NAN;
    }
    let mid = vals.len() / 2;
    let (_, m, _) = vals.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let upper = *m;
    if vals.len() % 2 == 1 {
        upper
    } else {
        let lower = vals[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

pub fn quantile(vals: &[f64], q: f64) -> f64 {
    if vals.is_empty() {
        return f64::NAN;
    }
    let mut v = vals.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    v[lo] * (1.0 - frac) + v[hi] * frac
}

/// Column means and standard deviations (population), with zero spreads
/// replaced by one.
pub fn column_moments(x: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
    let var = x.var_axis(Axis(0), 0.0);
    let std = var.mapv(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn eig_matches_known_2x2() {
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let (w, v) = sym_eig(a.view(), EigRange::All).unwrap();
        assert!((w[0] - 3.0).abs() < 1e-12 && (w[1] - 1.0).abs() < 1e-12);
        let r = a.dot(&v.column(0)) - v.column(0).mapv(|x| 3.0 * x);
        assert!(r.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn eig_subsets_agree_with_full() {
        let n = 40;
        let a = Array2::from_shape_fn((n, n), |(i, j)| (-((i as f64 - j as f64).powi(2)) / 20.0).exp());
        let (all, _) = sym_eig(a.view(), EigRange::All).unwrap();
        let (top, vecs) = sym_eig(a.view(), EigRange::Largest(5)).unwrap();
        assert_eq!(vecs.ncols(), 5);
        for i in 0..5 {
            assert!((all[i] - top[i]).abs() < 1e-10);
        }
        let (above, _) = sym_eig(a.view(), EigRange::Above(all[7] + 1e-9)).unwrap();
        assert_eq!(above.len(), 7);
    }

    #[test]
    fn solve_small_system() {
        let a = array![[4.0, 1.0], [2.0, 3.0]];
        let x = solve(a.view(), &[1.0, 2.0]).unwrap();
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-14);
        assert!((2.0 * x[0] + 3.0 * x[1] - 2.0).abs() < 1e-14);
        let singular = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(solve(singular.view(), &[1.0, 1.0]).is_err());
    }

    #[test]
    fn distances_symmetric() {
        let x = array![[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]];
        let d = pairwise_sq_dists(x.view());
        assert_eq!(d, d.t());
        assert!((d[[0, 1]] - 25.0).abs() < 1e-12);
        assert_eq!(median_offdiag(&d), 13.0);
    }
}
