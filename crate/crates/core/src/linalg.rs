//! Dense small-matrix utilities: SPD solves for the r×r inner systems, the
//! truncated-SVD oracle, balanced factors and column-space projectors.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::scalar::{cast, to_f64, Scalar};

/// Relative cutoff below which singular values are treated as zero.
pub const PINV_CUTOFF: f64 = 1e-12;

/// A Cholesky pivot `L_ii²` smaller than this fraction of the largest
/// diagonal entry marks the matrix as numerically singular.
const PIVOT_RATIO: f64 = 1e-13;

/// Relative residual a fallback solution must still reach to be returned.
const LOOSE_RESIDUAL: f64 = 1e-6;

/// Relative jitter levels tried after Cholesky fails.
const JITTER_LEVELS: [f64; 3] = [1e-12, 1e-10, 1e-8];

pub(crate) fn all_finite<T: Scalar>(m: &DMatrix<T>) -> bool {
    m.iter().all(|x| x.is_finite())
}

pub(crate) fn ensure_finite<T: Scalar>(m: &DMatrix<T>, what: &str) -> Result<()> {
    if all_finite(m) {
        Ok(())
    } else {
        invalid(format!("{what} contains non-finite entries"))
    }
}

/// Frobenius norm.
pub fn frobenius<T: Scalar>(m: &DMatrix<T>) -> T {
    m.norm()
}

/// Which branch of [`spd_solve_detailed`] produced the solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolvePath {
    Cholesky,
    /// Cholesky of `A + jitter·I`.
    Jitter(f64),
    /// LU with partial pivoting.
    General,
}

#[derive(Debug, Clone)]
pub struct SpdSolution<T: Scalar> {
    pub x: DMatrix<T>,
    pub path: SolvePath,
    pub residual: T,
}

fn validate_system<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<()> {
    if !a.is_square() {
        return invalid(format!("system matrix is {}x{}, not square", a.nrows(), a.ncols()));
    }
    if a.nrows() != b.nrows() {
        return invalid(format!(
            "right-hand side has {} rows, system has {}",
            b.nrows(),
            a.nrows()
        ));
    }
    ensure_finite(a, "system matrix")?;
    ensure_finite(b, "right-hand side")?;
    let scale = a.amax().max(T::one());
    let asym = (a - a.transpose()).amax();
    if asym > cast::<T>(1e-12) * scale {
        return invalid(format!("system matrix is not symmetric (max |A - A^T| = {asym:e})"));
    }
    Ok(())
}

/// Cholesky factorization that also rejects numerically singular matrices.
fn guarded_cholesky<T: Scalar>(a: &DMatrix<T>) -> Option<Cholesky<T, nalgebra::Dyn>> {
    let chol = Cholesky::new(a.clone())?;
    let max_diag = a.diagonal().iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    let floor = cast::<T>(PIVOT_RATIO) * max_diag;
    let l = chol.l_dirty();
    for i in 0..a.nrows() {
        let p = l[(i, i)];
        if (p * p).partial_cmp(&floor) != Some(std::cmp::Ordering::Greater) {
            return None;
        }
    }
    Some(chol)
}

fn residual<T: Scalar>(a: &DMatrix<T>, x: &DMatrix<T>, b: &DMatrix<T>) -> T {
    (a * x - b).norm()
}

/// Solves `A X = B` for symmetric positive-definite `A`.
///
/// Tries Cholesky first. When the factorization fails, is numerically
/// singular, or misses the residual target `1e-9·(1 + ‖B‖_F)`, it retries
/// with increasing diagonal jitter and finally an LU solve, returning the
/// candidate with the smallest residual. A candidate whose residual exceeds
/// `1e-6·(1 + ‖B‖_F)` counts as a failure.
pub fn spd_solve_detailed<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<SpdSolution<T>> {
    validate_system(a, b)?;
    let target = cast::<T>(1e-9) * (T::one() + b.norm());
    let mut best: Option<SpdSolution<T>> = None;

    if let Some(chol) = guarded_cholesky(a) {
        if keep_best(&mut best, a, b, chol.solve(b), SolvePath::Cholesky, target) {
            return Ok(best.unwrap());
        }
    }

    let scale = a.diagonal().iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    let scale = if scale > T::zero() { scale } else { T::one() };
    for level in JITTER_LEVELS {
        let eps = cast::<T>(level) * scale;
        let mut shifted = a.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += eps;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            if keep_best(&mut best, a, b, chol.solve(b), SolvePath::Jitter(level), target) {
                return Ok(best.unwrap());
            }
        }
    }

    if let Some(x) = a.clone().lu().solve(b) {
        keep_best(&mut best, a, b, x, SolvePath::General, target);
    }

    let loose = cast::<T>(LOOSE_RESIDUAL) * (T::one() + b.norm());
    match best {
        Some(sol) if sol.residual <= loose => Ok(sol),
        _ => Err(Error::SingularSystem(format!(
            "{}x{} system: Cholesky, jitter and LU solves all failed",
            a.nrows(),
            a.ncols()
        ))),
    }
}

/// Records `x` if it beats the current best; true when it meets `target`.
fn keep_best<T: Scalar>(
    best: &mut Option<SpdSolution<T>>,
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    x: DMatrix<T>,
    path: SolvePath,
    target: T,
) -> bool {
    if !all_finite(&x) {
        return false;
    }
    let res = residual(a, &x, b);
    if !res.is_finite() {
        return false;
    }
    if best.as_ref().is_none_or(|s| res < s.residual) {
        *best = Some(SpdSolution { x, path, residual: res });
    }
    res <= target
}

/// Solves `A X = B` for SPD `A` with the full fallback chain.
pub fn spd_solve<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    spd_solve_detailed(a, b).map(|s| s.x)
}

/// Cholesky-only solve; a singular or indefinite `A` is an error.
///
/// Used by the ALS iterations when no proximal or ridge shift is present,
/// where a rank-deficient Gram matrix must surface instead of being jittered.
pub fn spd_solve_strict<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    validate_system(a, b)?;
    let chol = guarded_cholesky(a).ok_or_else(|| {
        Error::SingularSystem(format!("{}x{} Gram matrix is rank-deficient", a.nrows(), a.ncols()))
    })?;
    Ok(chol.solve(b))
}

/// Rank-k singular triple with nonincreasing singular values.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdTriple<T: Scalar> {
    pub left: DMatrix<T>,
    pub singular: DVector<T>,
    pub right: DMatrix<T>,
}

impl<T: Scalar> SvdTriple<T> {
    pub fn rank(&self) -> usize {
        self.singular.len()
    }

    /// `left · diag(singular) · rightᵀ`.
    pub fn reconstruct(&self) -> DMatrix<T> {
        let mut scaled = self.left.clone();
        for (j, &s) in self.singular.iter().enumerate() {
            scaled.column_mut(j).scale_mut(s);
        }
        scaled * self.right.transpose()
    }
}

/// All singular values and vectors, sorted in nonincreasing order.
pub fn full_svd<T: Scalar>(w: &DMatrix<T>) -> Result<SvdTriple<T>> {
    ensure_finite(w, "matrix")?;
    let k = w.nrows().min(w.ncols());
    if k == 0 {
        return Ok(SvdTriple {
            left: DMatrix::zeros(w.nrows(), 0),
            singular: DVector::zeros(0),
            right: DMatrix::zeros(w.ncols(), 0),
        });
    }
    // computed in f64 by faer, whose SVD is accurate to a few ulps
    let a = faer::Mat::<f64>::from_fn(w.nrows(), w.ncols(), |i, j| to_f64(w[(i, j)]));
    let svd = a.thin_svd().map_err(|e| Error::InvalidInput(format!("SVD did not converge: {e:?}")))?;
    let (u, s, v) = (svd.U(), svd.S(), svd.V());
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| s[y].partial_cmp(&s[x]).unwrap_or(std::cmp::Ordering::Equal));
    let left = DMatrix::from_fn(w.nrows(), k, |i, j| cast(u[(i, order[j])]));
    let right = DMatrix::from_fn(w.ncols(), k, |i, j| cast(v[(i, order[j])]));
    let singular = DVector::from_fn(k, |j, _| cast(s[order[j]]));
    Ok(SvdTriple { left, singular, right })
}

/// Top-`r` singular triple of `w`: the Frobenius-optimal rank-`r` approximation.
pub fn truncated_svd<T: Scalar>(w: &DMatrix<T>, r: usize) -> Result<SvdTriple<T>> {
    let k = w.nrows().min(w.ncols());
    if r > k {
        return invalid(format!("rank {r} exceeds min dimension {k}"));
    }
    let full = full_svd(w)?;
    Ok(SvdTriple {
        left: full.left.columns(0, r).into_owned(),
        singular: full.singular.rows(0, r).into_owned(),
        right: full.right.columns(0, r).into_owned(),
    })
}

/// `Π_r(W)`, the dense best rank-`r` approximation.
pub fn rank_r_projection<T: Scalar>(w: &DMatrix<T>, r: usize) -> Result<DMatrix<T>> {
    Ok(truncated_svd(w, r)?.reconstruct())
}

/// Splits a triple into `(U_r Σ_r^{1/2}, V_r Σ_r^{1/2})`.
pub fn balanced_factors<T: Scalar>(t: &SvdTriple<T>) -> (DMatrix<T>, DMatrix<T>) {
    let mut u = t.left.clone();
    let mut v = t.right.clone();
    for (j, &s) in t.singular.iter().enumerate() {
        let root = s.max(T::zero()).sqrt();
        u.column_mut(j).scale_mut(root);
        v.column_mut(j).scale_mut(root);
    }
    (u, v)
}

/// Orthogonal projector `X (XᵀX)† Xᵀ` onto the column space of `x`.
///
/// The pseudo-inverse drops singular values at or below
/// `PINV_CUTOFF · σ_max`.
pub fn column_projector<T: Scalar>(x: &DMatrix<T>) -> Result<DMatrix<T>> {
    let n = x.nrows();
    let svd = full_svd(x)?;
    let smax = svd.singular.iter().fold(T::zero(), |m, &s| m.max(s));
    let cutoff = cast::<T>(PINV_CUTOFF) * smax;
    let keep = svd.singular.iter().take_while(|&&s| s > cutoff).count();
    let basis = svd.left.columns(0, keep);
    let mut p = DMatrix::zeros(n, n);
    if keep > 0 {
        p = basis * basis.transpose();
    }
    Ok(p)
}

/// `diag(d) · m`.
pub fn scale_rows<T: Scalar>(m: &DMatrix<T>, d: &DVector<T>) -> DMatrix<T> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row.scale_mut(d[i]);
    }
    out
}

/// `diag(d)⁻¹ · m`, dividing entrywise.
pub fn unscale_rows<T: Scalar>(m: &DMatrix<T>, d: &DVector<T>) -> DMatrix<T> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let di = d[i];
        row.apply(|x| *x /= di);
    }
    out
}
