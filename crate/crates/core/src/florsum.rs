//! Kronecker-factored metrics: diagonal K-FAC / Shampoo statistics, damped
//! fractional metric factors, and the metric-weighted projection (F-LorSum).
//!
//! With diagonal `D_U`, `D_V` the weighted norm is
//! `‖W‖²_UV = ⟨W, D_U W D_V⟩`, and the metric-optimal rank-r approximation is
//! `D^{-1/2} Π_r(D^{1/2} W̃)` with `D^{1/2}(W) = D_U^{1/2} W D_V^{1/2}`.
//! [`f_lorsum_project`] reaches it by ALS without leaving thin factors;
//! [`whitened_oracle`] computes it densely for verification.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{ensure_finite, rank_r_projection, scale_rows};
use crate::lorsum::{apply_terms, apply_terms_transpose, run_als, AlsConfig, Factors, HalfProblem, LowRankTerm};
use crate::scalar::{cast, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsKind {
    #[default]
    Kfac,
    Shampoo,
}

impl StatsKind {
    /// Default fractional power for this kind of statistics.
    pub fn default_gamma(self) -> f64 {
        match self {
            StatsKind::Kfac => 0.5,
            StatsKind::Shampoo => 0.25,
        }
    }
}

/// EMA second-moment diagonals for one layer.
///
/// Both vectors start at all ones; there is no bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerStats<T: Scalar> {
    pub kind: StatsKind,
    pub beta2: T,
    /// Output side, length `d_out`.
    pub v_s: DVector<T>,
    /// Input side, length `d_in`.
    pub v_x: DVector<T>,
    pub step_count: u64,
}

impl<T: Scalar> KroneckerStats<T> {
    pub fn new(kind: StatsKind, beta2: T, d_out: usize, d_in: usize) -> Result<Self> {
        if !(beta2 >= T::zero() && beta2 < T::one()) {
            return invalid(format!("beta2 must lie in [0, 1), got {beta2}"));
        }
        Ok(Self {
            kind,
            beta2,
            v_s: DVector::from_element(d_out, T::one()),
            v_x: DVector::from_element(d_in, T::one()),
            step_count: 0,
        })
    }

    /// Number of stored scalars.
    pub fn state_len(&self) -> usize {
        self.v_s.len() + self.v_x.len()
    }

    /// Per-step diagonals `(diag_s, diag_x)` for this statistics kind.
    pub fn batch_diagonals(&self, x: &DMatrix<T>, s: &DMatrix<T>) -> Result<(DVector<T>, DVector<T>)> {
        match self.kind {
            StatsKind::Kfac => kfac_diagonals(x, s),
            StatsKind::Shampoo => shampoo_diagonals(x, s),
        }
    }

    /// EMA update with precomputed per-step diagonals.
    pub fn absorb(&mut self, diag_s: &DVector<T>, diag_x: &DVector<T>) -> Result<()> {
        if diag_s.len() != self.v_s.len() || diag_x.len() != self.v_x.len() {
            return invalid(format!(
                "statistics are ({}, {}) but the batch gives ({}, {})",
                self.v_s.len(),
                self.v_x.len(),
                diag_s.len(),
                diag_x.len()
            ));
        }
        let b = self.beta2;
        let a = T::one() - b;
        self.v_s = &self.v_s * b + diag_s * a;
        self.v_x = &self.v_x * b + diag_x * a;
        self.step_count += 1;
        Ok(())
    }

    /// One EMA step from a batch `X: B×d_in`, `S: B×d_out`.
    pub fn update(&mut self, x: &DMatrix<T>, s: &DMatrix<T>) -> Result<()> {
        let (ds, dx) = self.batch_diagonals(x, s)?;
        self.absorb(&ds, &dx)
    }
}

fn check_batch<T: Scalar>(x: &DMatrix<T>, s: &DMatrix<T>) -> Result<usize> {
    if x.nrows() != s.nrows() {
        return invalid(format!("X has {} rows, S has {}", x.nrows(), s.nrows()));
    }
    if x.nrows() == 0 {
        return invalid("empty batch");
    }
    ensure_finite(x, "X")?;
    ensure_finite(s, "S")?;
    Ok(x.nrows())
}

fn column_sq_means<T: Scalar>(m: &DMatrix<T>, b: T) -> DVector<T> {
    DVector::from_fn(m.ncols(), |j, _| m.column(j).norm_squared() / b)
}

/// `(diag(SᵀS)/B, diag(XᵀX)/B)`.
pub fn kfac_diagonals<T: Scalar>(x: &DMatrix<T>, s: &DMatrix<T>) -> Result<(DVector<T>, DVector<T>)> {
    let b: T = cast(check_batch(x, s)? as f64);
    Ok((column_sq_means(s, b), column_sq_means(x, b)))
}

/// `(diag(Sᵀ(XXᵀ)S)/B, diag(Xᵀ(SSᵀ)X)/B)`, using only `B×B` and `B×d`
/// intermediates.
pub fn shampoo_diagonals<T: Scalar>(x: &DMatrix<T>, s: &DMatrix<T>) -> Result<(DVector<T>, DVector<T>)> {
    let b: T = cast(check_batch(x, s)? as f64);
    let xx = x * x.transpose();
    let ss = s * s.transpose();
    let mixed_x = &ss * x;
    let mixed_s = &xx * s;
    let dx = DVector::from_fn(x.ncols(), |j, _| x.column(j).dot(&mixed_x.column(j)) / b);
    let ds = DVector::from_fn(s.ncols(), |j, _| s.column(j).dot(&mixed_s.column(j)) / b);
    Ok((ds, dx))
}

/// Diagonal metric factors `D_U = diag(d_u)`, `D_V = diag(d_v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricPair<T: Scalar> {
    pub d_u: DVector<T>,
    pub d_v: DVector<T>,
    pub gamma: T,
    pub delta: T,
}

impl<T: Scalar> MetricPair<T> {
    /// All-ones (Euclidean) metric.
    pub fn identity(d_out: usize, d_in: usize) -> Self {
        Self {
            d_u: DVector::from_element(d_out, T::one()),
            d_v: DVector::from_element(d_in, T::one()),
            gamma: T::one(),
            delta: T::zero(),
        }
    }

    /// Metric from explicit diagonals; every entry must be positive.
    pub fn from_diagonals(d_u: DVector<T>, d_v: DVector<T>) -> Result<Self> {
        let pair = Self { d_u, d_v, gamma: T::one(), delta: T::zero() };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, d) in [("d_u", &self.d_u), ("d_v", &self.d_v)] {
            if let Some(bad) = d.iter().find(|&&x| !(x.is_finite() && x > T::zero())) {
                return invalid(format!("{name} has a non-positive or non-finite entry {bad}"));
            }
        }
        Ok(())
    }

    /// `‖W‖²_UV = Σᵢⱼ d_u[i] W²ᵢⱼ d_v[j]`.
    pub fn weight_norm_sq(&self, w: &DMatrix<T>) -> T {
        let mut acc = T::zero();
        for j in 0..w.ncols() {
            for i in 0..w.nrows() {
                let x = w[(i, j)];
                acc += self.d_u[i] * x * x * self.d_v[j];
            }
        }
        acc
    }

    /// `‖U‖²_U = ⟨U, D_U U⟩`.
    pub fn out_norm_sq(&self, u: &DMatrix<T>) -> T {
        scale_rows(u, &self.d_u).dot(u)
    }

    /// `‖V‖²_V = ⟨V, D_V V⟩`.
    pub fn in_norm_sq(&self, v: &DMatrix<T>) -> T {
        scale_rows(v, &self.d_v).dot(v)
    }

    /// `D^p(W) = D_U^p W D_V^p`.
    pub fn apply_power(&self, w: &DMatrix<T>, p: T) -> DMatrix<T> {
        DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| {
            self.d_u[i].powf(p) * w[(i, j)] * self.d_v[j].powf(p)
        })
    }
}

/// `d_u = (v_s + δ)^γ`, `d_v = (v_x + δ)^γ`, damping applied before the power.
pub fn metric_factors<T: Scalar>(stats: &KroneckerStats<T>, delta: T, gamma: T) -> Result<MetricPair<T>> {
    if !(delta >= T::zero() && delta.is_finite()) {
        return invalid(format!("delta must be finite and >= 0, got {delta}"));
    }
    if !(gamma > T::zero() && gamma <= T::one()) {
        return invalid(format!("gamma must lie in (0, 1], got {gamma}"));
    }
    let pair = MetricPair {
        d_u: stats.v_s.map(|x| (x + delta).powf(gamma)),
        d_v: stats.v_x.map(|x| (x + delta).powf(gamma)),
        gamma,
        delta,
    };
    pair.validate()?;
    Ok(pair)
}

/// Metric-weighted proximal ALS on
/// `W̃ = c₁U₁V₁ᵀ + D_U⁻¹ (Σ_{j≥2} cⱼUⱼVⱼᵀ) D_V⁻¹`.
///
/// Only the step terms are preconditioned; the anchor enters unscaled.
pub fn f_lorsum_project<T: Scalar>(
    anchor: &LowRankTerm<T>,
    step_terms: &[LowRankTerm<T>],
    metrics: &MetricPair<T>,
    config: &AlsConfig<T>,
) -> Result<Factors<T>> {
    validate_terms(anchor, step_terms)?;
    metrics.validate()?;
    run_als(anchor, step_terms, Some(metrics), config, |_, _| {})
}

/// Like [`f_lorsum_project`] but returns the factors after every iteration.
pub fn f_lorsum_iterates<T: Scalar>(
    anchor: &LowRankTerm<T>,
    step_terms: &[LowRankTerm<T>],
    metrics: &MetricPair<T>,
    config: &AlsConfig<T>,
) -> Result<Vec<Factors<T>>> {
    validate_terms(anchor, step_terms)?;
    metrics.validate()?;
    let mut out = Vec::new();
    run_als(anchor, step_terms, Some(metrics), config, |u, v| out.push((u.clone(), v.clone())))?;
    Ok(out)
}

/// Which factor a single half-update solves for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Out,
    In,
}

/// One proximal half-update of [`f_lorsum_project`] with the other factor
/// held at `other`: solving for `U` on [`Side::Out`], for `V` on [`Side::In`].
pub fn f_lorsum_half_update<T: Scalar>(
    anchor: &LowRankTerm<T>,
    step_terms: &[LowRankTerm<T>],
    metrics: &MetricPair<T>,
    other: &DMatrix<T>,
    rho: T,
    side: Side,
) -> Result<DMatrix<T>> {
    validate_terms(anchor, step_terms)?;
    metrics.validate()?;
    if !(rho >= T::zero() && rho.is_finite()) {
        return invalid(format!("rho must be finite and >= 0, got {rho}"));
    }
    let anchor = &anchor.folded();
    let (m, n) = (anchor.u.nrows(), anchor.v.nrows());
    if metrics.d_u.len() != m || metrics.d_v.len() != n {
        return invalid("metric lengths do not match the factors");
    }
    let (problem, delta) = match side {
        Side::Out => {
            if other.shape() != anchor.v.shape() {
                return invalid("other factor must match the anchor input factor");
            }
            let p = HalfProblem {
                anchor_out: &anchor.u,
                anchor_in: &anchor.v,
                metric_out: Some(&metrics.d_u),
                metric_in: Some(&metrics.d_v),
                shift: rho,
                anchor_weight: rho,
            };
            (p, apply_terms(step_terms, other, m))
        }
        Side::In => {
            if other.shape() != anchor.u.shape() {
                return invalid("other factor must match the anchor output factor");
            }
            let p = HalfProblem {
                anchor_out: &anchor.v,
                anchor_in: &anchor.u,
                metric_out: Some(&metrics.d_v),
                metric_in: Some(&metrics.d_u),
                shift: rho,
                anchor_weight: rho,
            };
            (p, apply_terms_transpose(step_terms, other, n))
        }
    };
    problem.solve(other, &delta)
}

fn validate_terms<T: Scalar>(anchor: &LowRankTerm<T>, steps: &[LowRankTerm<T>]) -> Result<()> {
    let mut all = Vec::with_capacity(steps.len() + 1);
    all.push(anchor.clone());
    all.extend_from_slice(steps);
    crate::lorsum::LowRankSum::new(all).map(|_| ())
}

/// Dense `W̃ = c₁U₁V₁ᵀ + D_U⁻¹ Δ D_V⁻¹` (test oracle).
pub fn materialize_preconditioned<T: Scalar>(
    anchor: &LowRankTerm<T>,
    step_terms: &[LowRankTerm<T>],
    metrics: &MetricPair<T>,
) -> DMatrix<T> {
    let mut delta = DMatrix::zeros(anchor.u.nrows(), anchor.v.nrows());
    for t in step_terms {
        delta += (&t.u * t.v.transpose()) * t.coeff;
    }
    (&anchor.u * anchor.v.transpose()) * anchor.coeff + metrics.apply_power(&delta, -T::one())
}

/// Dense metric-optimal rank-`r` approximation `D^{-1/2} Π_r(D^{1/2} W̃)`.
pub fn whitened_oracle<T: Scalar>(w: &DMatrix<T>, metrics: &MetricPair<T>, r: usize) -> Result<DMatrix<T>> {
    metrics.validate()?;
    if metrics.d_u.len() != w.nrows() || metrics.d_v.len() != w.ncols() {
        return invalid("metric lengths do not match the matrix");
    }
    let half: T = cast(0.5);
    let whitened = metrics.apply_power(w, half);
    let projected = rank_r_projection(&whitened, r)?;
    Ok(metrics.apply_power(&projected, -half))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, named_rng};

    #[test]
    fn kfac_identical_rows() {
        let x = DMatrix::from_fn(5, 3, |_, j| [1.0, -2.0, 0.5][j]);
        let s = DMatrix::from_element(5, 2, 3.0);
        let mut st = KroneckerStats::<f64>::new(StatsKind::Kfac, 0.0, 2, 3).unwrap();
        st.update(&x, &s).unwrap();
        assert_eq!(st.v_x.as_slice(), &[1.0, 4.0, 0.25]);
        assert_eq!(st.v_s.as_slice(), &[9.0, 9.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn kfac_pure_decay() {
        let mut st = KroneckerStats::<f64>::new(StatsKind::Kfac, 0.99, 2, 3).unwrap();
        let x = DMatrix::zeros(4, 3);
        let s = DMatrix::zeros(4, 2);
        for _ in 0..10 {
            st.update(&x, &s).unwrap();
        }
        let expect = 0.99f64.powi(10);
        assert!(st.v_x.iter().all(|&v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn kfac_matches_dense_gram() {
        let mut rng = named_rng(1, "florsum/kfac");
        let x: DMatrix<f64> = gaussian_matrix(&mut rng, 64, 7, 1.0);
        let s: DMatrix<f64> = gaussian_matrix(&mut rng, 64, 5, 1.0);
        let mut st = KroneckerStats::new(StatsKind::Kfac, 0.0, 5, 7).unwrap();
        st.update(&x, &s).unwrap();
        let gram = x.transpose() * &x / 64.0;
        for j in 0..7 {
            assert!((st.v_x[j] - gram[(j, j)]).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_drift_is_rejected() {
        let mut st = KroneckerStats::<f64>::new(StatsKind::Kfac, 0.5, 2, 3).unwrap();
        let x = DMatrix::zeros(4, 4);
        let s = DMatrix::zeros(4, 2);
        assert!(st.update(&x, &s).is_err());
        assert!(KroneckerStats::<f64>::new(StatsKind::Kfac, 1.0, 2, 3).is_err());
    }

    #[test]
    fn shampoo_cases() {
        let mut rng = named_rng(2, "florsum/shampoo");
        let x: DMatrix<f64> = gaussian_matrix(&mut rng, 8, 6, 1.0);
        let s0 = DMatrix::zeros(8, 4);
        let (_, dx) = shampoo_diagonals(&x, &s0).unwrap();
        assert_eq!(dx.amax(), 0.0);

        let x1 = DMatrix::from_row_slice(1, 3, &[1.0f64, -2.0, 3.0]);
        let s1 = DMatrix::from_row_slice(1, 2, &[0.5f64, 2.0]);
        let (ds, dx) = shampoo_diagonals(&x1, &s1).unwrap();
        let s_norm = 0.25 + 4.0;
        let x_norm = 14.0;
        for j in 0..3 {
            assert!((dx[j] - s_norm * x1[(0, j)].powi(2)).abs() < 1e-14);
        }
        for j in 0..2 {
            assert!((ds[j] - x_norm * s1[(0, j)].powi(2)).abs() < 1e-14);
        }

        let s: DMatrix<f64> = gaussian_matrix(&mut rng, 8, 4, 1.0);
        let (ds, dx) = shampoo_diagonals(&x, &s).unwrap();
        let dense_x = x.transpose() * &s * s.transpose() * &x / 8.0;
        let dense_s = s.transpose() * &x * x.transpose() * &s / 8.0;
        for j in 0..6 {
            assert!((dx[j] - dense_x[(j, j)]).abs() < 1e-10);
        }
        for j in 0..4 {
            assert!((ds[j] - dense_s[(j, j)]).abs() < 1e-10);
        }
    }

    #[test]
    fn metric_factor_cases() {
        let st = KroneckerStats::<f64>::new(StatsKind::Kfac, 0.9, 3, 2).unwrap();
        for gamma in [0.25, 0.5, 1.0] {
            let m = metric_factors(&st, 0.0, gamma).unwrap();
            assert!(m.d_u.iter().chain(m.d_v.iter()).all(|&d| d == 1.0));
        }
        let mut st = st;
        st.v_s = DVector::from_vec(vec![0.5, 2.0, 3.0]);
        let m = metric_factors(&st, 1e-5, 1.0).unwrap();
        assert!((m.d_u[1] - (2.0 + 1e-5)).abs() < 1e-15);
        assert!(metric_factors(&st, 1e-5, 0.0).is_err());
        assert!(metric_factors(&st, -1.0, 0.5).is_err());
    }

    #[test]
    fn half_power_is_kronecker_root() {
        let mut rng = named_rng(3, "florsum/kron");
        let w: DMatrix<f64> = gaussian_matrix(&mut rng, 4, 3, 1.0);
        let d_u = DVector::from_vec(vec![0.5f64, 1.5, 2.0, 4.0]);
        let d_v = DVector::from_vec(vec![3.0, 0.2, 1.1]);
        let m = MetricPair::from_diagonals(d_u.clone(), d_v.clone()).unwrap();
        // column-major vec(W); (D_V ⊗ D_U)^{1/2}
        let mut kron = DMatrix::zeros(12, 12);
        for a in 0..3 {
            for b in 0..4 {
                kron[(a * 4 + b, a * 4 + b)] = (d_v[a] * d_u[b]).sqrt();
            }
        }
        let vec_w = DVector::from_column_slice(w.as_slice());
        let lhs = kron * vec_w;
        let rhs = m.apply_power(&w, 0.5);
        assert!((lhs - DVector::from_column_slice(rhs.as_slice())).norm() < 1e-14);
    }

    #[test]
    fn oracle_identity_and_low_rank_cases() {
        let mut rng = named_rng(4, "florsum/oracle");
        let w: DMatrix<f64> = gaussian_matrix(&mut rng, 6, 5, 1.0);
        let id = MetricPair::identity(6, 5);
        let o = whitened_oracle(&w, &id, 2).unwrap();
        assert!((o - rank_r_projection(&w, 2).unwrap()).norm() < 1e-12);

        let low = gaussian_matrix::<f64>(&mut rng, 6, 2, 1.0) * gaussian_matrix::<f64>(&mut rng, 2, 5, 1.0);
        let m = MetricPair::from_diagonals(
            DVector::from_fn(6, |i, _| 0.5 + i as f64),
            DVector::from_fn(5, |j, _| 2.0 / (1.0 + j as f64)),
        )
        .unwrap();
        assert!((whitened_oracle(&low, &m, 2).unwrap() - &low).norm() < 1e-11);
    }

    #[test]
    fn zero_steps_keep_the_anchor() {
        let mut rng = named_rng(5, "florsum/anchor");
        let anchor = LowRankTerm::new(
            1.0,
            gaussian_matrix::<f64>(&mut rng, 7, 2, 1.0),
            gaussian_matrix::<f64>(&mut rng, 5, 2, 1.0),
        );
        let m = MetricPair::from_diagonals(
            DVector::from_fn(7, |i, _| 1.0 + 0.3 * i as f64),
            DVector::from_fn(5, |j, _| 0.4 + j as f64),
        )
        .unwrap();
        let (u, v) = f_lorsum_project(&anchor, &[], &m, &AlsConfig::proximal(3, 0.1)).unwrap();
        assert!((u - &anchor.u).norm() < 1e-10);
        assert!((v - &anchor.v).norm() < 1e-10);
    }
}
