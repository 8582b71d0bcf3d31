//! Rank-r projection of a sum of low-rank matrices (LorSum).
//!
//! A [`LowRankSum`] stands for `W̄ = Σ cⱼ Uⱼ Vⱼᵀ` without ever forming the
//! dense matrix. The projection runs warm-started alternating least squares
//! on the factors of the first (anchor) term; every product with `W̄` is
//! evaluated term by term as `Uⱼ (Vⱼᵀ V)` so the largest buffer touched is
//! `max(d_out, d_in) × Σ rⱼ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::florsum::MetricPair;
use crate::linalg::{ensure_finite, scale_rows, spd_solve, spd_solve_strict, unscale_rows};
use crate::scalar::{cast, Scalar};

/// Largest dense matrix [`materialize`] will build.
pub const MATERIALIZE_CAP: usize = 1 << 22;

/// Upper bound on inner iterations accepted by [`AlsConfig`].
pub const MAX_INNER_ITERS: usize = 64;

/// One term `c · U Vᵀ` of a low-rank sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankTerm<T: Scalar> {
    pub coeff: T,
    /// `d_out × r_j`
    pub u: DMatrix<T>,
    /// `d_in × r_j`
    pub v: DMatrix<T>,
}

impl<T: Scalar> LowRankTerm<T> {
    pub fn new(coeff: T, u: DMatrix<T>, v: DMatrix<T>) -> Self {
        Self { coeff, u, v }
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    /// The same matrix with the coefficient moved into `U`.
    pub(crate) fn folded(&self) -> Self {
        if self.coeff == T::one() {
            return self.clone();
        }
        Self { coeff: T::one(), u: &self.u * self.coeff, v: self.v.clone() }
    }

    /// `c · U (Vᵀ x)` for a `d_in × k` block `x`.
    pub fn apply(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let small = self.v.tr_mul(x) * self.coeff;
        &self.u * small
    }

    /// `c · V (Uᵀ y)` for a `d_out × k` block `y`.
    pub fn apply_transpose(&self, y: &DMatrix<T>) -> DMatrix<T> {
        let small = self.u.tr_mul(y) * self.coeff;
        &self.v * small
    }

    fn validate(&self, idx: usize) -> Result<()> {
        if self.u.ncols() != self.v.ncols() {
            return invalid(format!(
                "term {idx}: factor ranks differ ({} vs {})",
                self.u.ncols(),
                self.v.ncols()
            ));
        }
        if !self.coeff.is_finite() {
            return invalid(format!("term {idx}: non-finite coefficient"));
        }
        ensure_finite(&self.u, &format!("term {idx} output factor"))?;
        ensure_finite(&self.v, &format!("term {idx} input factor"))
    }
}

/// Unmaterialized `Σ cⱼ Uⱼ Vⱼᵀ`; term 0 is the anchor / warm start.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankSum<T: Scalar> {
    pub terms: Vec<LowRankTerm<T>>,
}

impl<T: Scalar> LowRankSum<T> {
    pub fn new(terms: Vec<LowRankTerm<T>>) -> Result<Self> {
        let sum = Self { terms };
        sum.validate()?;
        Ok(sum)
    }

    pub fn anchor(&self) -> &LowRankTerm<T> {
        &self.terms[0]
    }

    pub fn steps(&self) -> &[LowRankTerm<T>] {
        &self.terms[1..]
    }

    pub fn rows(&self) -> usize {
        self.terms[0].u.nrows()
    }

    pub fn cols(&self) -> usize {
        self.terms[0].v.nrows()
    }

    /// Sum of all term ranks.
    pub fn stacked_rank(&self) -> usize {
        self.terms.iter().map(LowRankTerm::rank).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return invalid("low-rank sum needs at least one term");
        }
        let (m, n) = (self.terms[0].u.nrows(), self.terms[0].v.nrows());
        for (i, t) in self.terms.iter().enumerate() {
            t.validate(i)?;
            if t.u.nrows() != m || t.v.nrows() != n {
                return invalid(format!(
                    "term {i} is {}x{}, anchor is {m}x{n}",
                    t.u.nrows(),
                    t.v.nrows()
                ));
            }
        }
        if self.terms[0].rank() == 0 {
            return invalid("anchor term has rank 0");
        }
        Ok(())
    }
}

/// Sum of `t.apply(x)` over `terms`, accumulated in order.
pub fn apply_terms<T: Scalar>(terms: &[LowRankTerm<T>], x: &DMatrix<T>, rows: usize) -> DMatrix<T> {
    let mut acc = DMatrix::zeros(rows, x.ncols());
    for t in terms {
        acc += t.apply(x);
    }
    acc
}

/// Sum of `t.apply_transpose(y)` over `terms`, accumulated in order.
pub fn apply_terms_transpose<T: Scalar>(terms: &[LowRankTerm<T>], y: &DMatrix<T>, rows: usize) -> DMatrix<T> {
    let mut acc = DMatrix::zeros(rows, y.ncols());
    for t in terms {
        acc += t.apply_transpose(y);
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlsMode {
    /// Alternating: the second half-update sees the fresh first factor.
    #[default]
    GaussSeidel,
    /// Simultaneous: both factors are computed from the previous pair.
    Jacobi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    #[default]
    UFirst,
    VFirst,
}

/// Regularizer of the inner least-squares problems.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularizer<T> {
    /// `ρ/2 (‖U − c₁U₁‖² + ‖V − V₁‖²)`, pulling toward the anchor factors.
    Proximal(T),
    /// `λ/2 (‖U‖² + ‖V‖²)`.
    Ridge(T),
}

impl<T: Scalar> Regularizer<T> {
    /// Diagonal shift added to each Gram matrix.
    fn shift(&self) -> T {
        match *self {
            Regularizer::Proximal(r) | Regularizer::Ridge(r) => r,
        }
    }

    /// Weight on the anchor factor in each right-hand side.
    fn anchor_weight(&self) -> T {
        match *self {
            Regularizer::Proximal(r) => r,
            Regularizer::Ridge(_) => T::zero(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlsConfig<T> {
    /// Number of full (U, V) update pairs.
    pub inner_iters: usize,
    pub regularizer: Regularizer<T>,
    pub mode: AlsMode,
    pub order: UpdateOrder,
}

impl<T: Scalar> AlsConfig<T> {
    pub fn proximal(inner_iters: usize, rho: T) -> Self {
        Self {
            inner_iters,
            regularizer: Regularizer::Proximal(rho),
            mode: AlsMode::GaussSeidel,
            order: UpdateOrder::UFirst,
        }
    }

    pub fn ridge(inner_iters: usize, lambda: T) -> Self {
        Self { regularizer: Regularizer::Ridge(lambda), ..Self::proximal(inner_iters, lambda) }
    }

    pub fn with_order(mut self, order: UpdateOrder) -> Self {
        self.order = order;
        self
    }

    pub fn with_mode(mut self, mode: AlsMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_iters == 0 || self.inner_iters > MAX_INNER_ITERS {
            return invalid(format!(
                "inner_iters must be in 1..={MAX_INNER_ITERS}, got {}",
                self.inner_iters
            ));
        }
        let s = self.regularizer.shift();
        if !(s.is_finite() && s >= T::zero()) {
            return invalid(format!("regularizer must be finite and >= 0, got {s}"));
        }
        Ok(())
    }
}

/// One side of a half-update: solving for `U` uses `(U₁, V₁, d_u, d_v)`,
/// solving for `V` the transposed roles `(V₁, U₁, d_v, d_u)`. The anchor
/// must be folded (unit coefficient).
pub(crate) struct HalfProblem<'a, T: Scalar> {
    pub anchor_out: &'a DMatrix<T>,
    pub anchor_in: &'a DMatrix<T>,
    pub metric_out: Option<&'a DVector<T>>,
    pub metric_in: Option<&'a DVector<T>>,
    pub shift: T,
    pub anchor_weight: T,
}

impl<T: Scalar> HalfProblem<'_, T> {
    /// Solves for the factor on this side given the other factor `other`
    /// and the unweighted step product `delta = Δ · other`:
    ///
    /// `(w·A_out + A_out (A_inᵀ D_in other) + D_out⁻¹ delta)(otherᵀ D_in other + s I)⁻¹`
    pub fn solve(&self, other: &DMatrix<T>, delta: &DMatrix<T>) -> Result<DMatrix<T>> {
        let r = other.ncols();
        let weighted = match self.metric_in {
            Some(d) => scale_rows(other, d),
            None => other.clone(),
        };
        let mut gram = other.tr_mul(&weighted);
        gram = (&gram + gram.transpose()) * cast::<T>(0.5);
        for i in 0..r {
            gram[(i, i)] += self.shift;
        }

        let mut rhs = self.anchor_out * self.anchor_weight;
        rhs += self.anchor_out * self.anchor_in.tr_mul(&weighted);
        match self.metric_out {
            Some(d) => rhs += unscale_rows(delta, d),
            None => rhs += delta,
        }

        let rhs_t = rhs.transpose();
        let sol = if self.shift > T::zero() {
            spd_solve(&gram, &rhs_t)?
        } else {
            spd_solve_strict(&gram, &rhs_t)?
        };
        Ok(sol.transpose())
    }
}

/// Factor pair returned by the projections.
pub type Factors<T> = (DMatrix<T>, DMatrix<T>);

/// ALS driver shared by the Euclidean and metric projections.
pub(crate) fn run_als<T: Scalar>(
    anchor: &LowRankTerm<T>,
    steps: &[LowRankTerm<T>],
    metric: Option<&MetricPair<T>>,
    config: &AlsConfig<T>,
    mut observe: impl FnMut(&DMatrix<T>, &DMatrix<T>),
) -> Result<Factors<T>> {
    config.validate()?;
    let (m, n) = (anchor.u.nrows(), anchor.v.nrows());
    if let Some(mp) = metric {
        if mp.d_u.len() != m || mp.d_v.len() != n {
            return invalid(format!(
                "metric lengths ({}, {}) do not match {m}x{n}",
                mp.d_u.len(),
                mp.d_v.len()
            ));
        }
    }
    let anchor = &anchor.folded();
    let shift = config.regularizer.shift();
    let anchor_weight = config.regularizer.anchor_weight();
    let u_side = HalfProblem {
        anchor_out: &anchor.u,
        anchor_in: &anchor.v,
        metric_out: metric.map(|p| &p.d_u),
        metric_in: metric.map(|p| &p.d_v),
        shift,
        anchor_weight,
    };
    let v_side = HalfProblem {
        anchor_out: &anchor.v,
        anchor_in: &anchor.u,
        metric_out: metric.map(|p| &p.d_v),
        metric_in: metric.map(|p| &p.d_u),
        shift,
        anchor_weight,
    };
    let update_u = |v: &DMatrix<T>| u_side.solve(v, &apply_terms(steps, v, m));
    let update_v = |u: &DMatrix<T>| v_side.solve(u, &apply_terms_transpose(steps, u, n));

    let mut u = anchor.u.clone();
    let mut v = anchor.v.clone();
    for _ in 0..config.inner_iters {
        match (config.mode, config.order) {
            (AlsMode::GaussSeidel, UpdateOrder::UFirst) => {
                u = update_u(&v)?;
                v = update_v(&u)?;
            }
            (AlsMode::GaussSeidel, UpdateOrder::VFirst) => {
                v = update_v(&u)?;
                u = update_u(&v)?;
            }
            (AlsMode::Jacobi, _) => {
                let next_u = update_u(&v)?;
                v = update_v(&u)?;
                u = next_u;
            }
        }
        observe(&u, &v);
    }
    Ok((u, v))
}

fn require_proximal<T: Scalar>(config: &AlsConfig<T>) -> Result<()> {
    match config.regularizer {
        Regularizer::Proximal(_) => Ok(()),
        Regularizer::Ridge(_) => invalid("expected a proximal regularizer"),
    }
}

/// Proximal ALS projection of `sum` to the rank of its anchor term.
///
/// Runs exactly `config.inner_iters` update pairs warm-started at the anchor
/// factors. With `ρ = 0` and a rank-deficient Gram matrix the call fails with
/// [`Error::SingularSystem`].
pub fn lorsum_project<T: Scalar>(sum: &LowRankSum<T>, config: &AlsConfig<T>) -> Result<Factors<T>> {
    sum.validate()?;
    require_proximal(config)?;
    run_als(sum.anchor(), sum.steps(), None, config, |_, _| {})
}

/// Like [`lorsum_project`] but returns the factors after every iteration.
pub fn lorsum_iterates<T: Scalar>(sum: &LowRankSum<T>, config: &AlsConfig<T>) -> Result<Vec<Factors<T>>> {
    sum.validate()?;
    let mut out = Vec::with_capacity(config.inner_iters);
    run_als(sum.anchor(), sum.steps(), None, config, |u, v| out.push((u.clone(), v.clone())))?;
    Ok(out)
}

/// ALS with ridge terms `(VᵀV + λI)⁻¹` and no pull toward the anchor.
pub fn ridge_als_project<T: Scalar>(sum: &LowRankSum<T>, config: &AlsConfig<T>) -> Result<Factors<T>> {
    sum.validate()?;
    if let Regularizer::Proximal(_) = config.regularizer {
        return invalid("expected a ridge regularizer");
    }
    run_als(sum.anchor(), sum.steps(), None, config, |_, _| {})
}

/// Single simultaneous fixed-point step from the anchor factors:
/// `U₊ = W̄V₀(V₀ᵀV₀ + λI)⁻¹`, `V₊ = W̄ᵀU₀(U₀ᵀU₀ + λI)⁻¹`.
pub fn lorsum_jacobi_step<T: Scalar>(sum: &LowRankSum<T>, lambda: T) -> Result<Factors<T>> {
    sum.validate()?;
    let config = AlsConfig::ridge(1, lambda).with_mode(AlsMode::Jacobi);
    run_als(sum.anchor(), sum.steps(), None, &config, |_, _| {})
}

/// Preconditioned factor update (ScaledGD(λ) / Riemannian-preconditioned LoRA):
/// `U₊ = U − η G_U (VᵀV + λI)⁻¹`, `V₊ = V − η G_V (UᵀU + λI)⁻¹`.
pub fn precond_lora_update<T: Scalar>(
    u: &DMatrix<T>,
    v: &DMatrix<T>,
    grad_u: &DMatrix<T>,
    grad_v: &DMatrix<T>,
    eta: T,
    lambda: T,
) -> Result<Factors<T>> {
    if grad_u.shape() != u.shape() || grad_v.shape() != v.shape() {
        return invalid("gradient shapes must match factor shapes");
    }
    let dir_u = precondition(grad_u, v, lambda)?;
    let dir_v = precondition(grad_v, u, lambda)?;
    Ok((u - dir_u * eta, v - dir_v * eta))
}

/// `grad (otherᵀ other + λI)⁻¹`.
pub(crate) fn precondition<T: Scalar>(grad: &DMatrix<T>, other: &DMatrix<T>, lambda: T) -> Result<DMatrix<T>> {
    let r = other.ncols();
    let mut gram = other.tr_mul(other);
    for i in 0..r {
        gram[(i, i)] += lambda;
    }
    let rhs = grad.transpose();
    let sol = if lambda > T::zero() { spd_solve(&gram, &rhs)? } else { spd_solve_strict(&gram, &rhs)? };
    Ok(sol.transpose())
}

/// Dense `Σ cⱼ Uⱼ Vⱼᵀ`. Test oracle only; refuses matrices above
/// [`MATERIALIZE_CAP`] entries.
pub fn materialize<T: Scalar>(sum: &LowRankSum<T>) -> Result<DMatrix<T>> {
    sum.validate()?;
    let elements = sum.rows() * sum.cols();
    if elements > MATERIALIZE_CAP {
        return Err(Error::TooLarge { elements, cap: MATERIALIZE_CAP });
    }
    let mut w = DMatrix::zeros(sum.rows(), sum.cols());
    for t in &sum.terms {
        w += (&t.u * t.v.transpose()) * t.coeff;
    }
    Ok(w)
}
