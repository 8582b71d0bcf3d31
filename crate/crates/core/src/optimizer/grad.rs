//! Cached gradient factors `G = SᵀX` and norm clipping.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::ensure_finite;
use crate::lorsum::LowRankTerm;
use crate::scalar::Scalar;

/// How the per-example loss was reduced before `S` was formed.
///
/// The multiplier (e.g. `1/B` for a mean) is already folded into `S`; the
/// tag only records what was done.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleConvention {
    #[default]
    Mean,
    Sum,
}

/// Layer inputs `X: B×d_in` and output gradients `S: B×d_out` with
/// `G = SᵀX: d_out×d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradFactor<T: Scalar> {
    pub x: DMatrix<T>,
    pub s: DMatrix<T>,
    pub batch: usize,
    pub convention: ScaleConvention,
}

impl<T: Scalar> GradFactor<T> {
    pub fn new(x: DMatrix<T>, s: DMatrix<T>, convention: ScaleConvention) -> Result<Self> {
        if x.nrows() != s.nrows() {
            return invalid(format!("X has {} rows but S has {}", x.nrows(), s.nrows()));
        }
        if x.nrows() == 0 {
            return invalid("gradient factors need at least one row");
        }
        ensure_finite(&x, "X")?;
        ensure_finite(&s, "S")?;
        Ok(Self { batch: x.nrows(), x, s, convention })
    }

    pub fn d_in(&self) -> usize {
        self.x.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.s.ncols()
    }

    /// Dense `SᵀX`. Oracle and dense-baseline use only.
    pub fn dense(&self) -> DMatrix<T> {
        self.s.tr_mul(&self.x)
    }

    /// `G` as the low-rank term `coeff · Sᵀ (Xᵀ)ᵀ`.
    pub fn term(&self, coeff: T) -> LowRankTerm<T> {
        LowRankTerm::new(coeff, self.s.transpose(), self.x.transpose())
    }

    /// `G V = Sᵀ (X V)`.
    pub fn times_in(&self, v: &DMatrix<T>) -> DMatrix<T> {
        self.s.tr_mul(&(&self.x * v))
    }

    /// `Gᵀ U = Xᵀ (S U)`.
    pub fn transpose_times_out(&self, u: &DMatrix<T>) -> DMatrix<T> {
        self.x.tr_mul(&(&self.s * u))
    }

    /// `‖SᵀX‖²_F = Σᵢⱼ (SSᵀ)ᵢⱼ (XXᵀ)ᵢⱼ`, via `B×B` Gram matrices.
    pub fn norm_sq(&self) -> T {
        let ss = &self.s * self.s.transpose();
        let xx = &self.x * self.x.transpose();
        ss.component_mul(&xx).sum().max(T::zero())
    }

    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    /// Rows `start..start + len` of both factors.
    pub fn rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.batch || len == 0 {
            return invalid(format!("row range {start}..{} outside batch {}", start + len, self.batch));
        }
        Self::new(
            self.x.rows(start, len).into_owned(),
            self.s.rows(start, len).into_owned(),
            self.convention,
        )
    }
}

/// Builds a [`GradFactor`] from row-major activation and gradient buffers.
///
/// The last entry of each shape is the feature width; all leading dimensions
/// (batch, sequence, ...) are flattened into `B` and must agree.
pub fn capture_grad_factors<T: Scalar>(
    inputs: &[T],
    input_shape: &[usize],
    output_grads: &[T],
    grad_shape: &[usize],
    convention: ScaleConvention,
) -> Result<GradFactor<T>> {
    let (x_lead, d_in) = split_shape(input_shape, "input")?;
    let (s_lead, d_out) = split_shape(grad_shape, "gradient")?;
    if x_lead != s_lead {
        return invalid(format!("leading dimensions differ: {x_lead:?} vs {s_lead:?}"));
    }
    let b: usize = x_lead.iter().product();
    if inputs.len() != b * d_in {
        return invalid(format!("input buffer has {} values, shape needs {}", inputs.len(), b * d_in));
    }
    if output_grads.len() != b * d_out {
        return invalid(format!(
            "gradient buffer has {} values, shape needs {}",
            output_grads.len(),
            b * d_out
        ));
    }
    GradFactor::new(
        DMatrix::from_row_slice(b, d_in, inputs),
        DMatrix::from_row_slice(b, d_out, output_grads),
        convention,
    )
}

fn split_shape<'a>(shape: &'a [usize], what: &str) -> Result<(&'a [usize], usize)> {
    match shape.split_last() {
        Some((&d, lead)) if !lead.is_empty() => Ok((lead, d)),
        _ => invalid(format!("{what} shape needs at least two dimensions, got {shape:?}")),
    }
}

/// Norm clipping split across the factors.
///
/// With `c = min(1, max_norm / ‖G‖_F)` returns `(cᵃX, c¹⁻ᵃS)` and `c`, so the
/// product is `c·G` whatever the split.
pub fn clip_grad_factors<T: Scalar>(gf: &GradFactor<T>, max_norm: T, a: T) -> Result<(GradFactor<T>, T)> {
    if !(max_norm > T::zero() && max_norm.is_finite()) {
        return invalid(format!("clip norm must be positive, got {max_norm}"));
    }
    if !(a >= T::zero() && a <= T::one()) {
        return invalid(format!("clip split exponent must lie in [0, 1], got {a}"));
    }
    let norm = gf.norm();
    if norm <= max_norm {
        return Ok((gf.clone(), T::one()));
    }
    let c = max_norm / norm;
    let mut out = gf.clone();
    out.x *= c.powf(a);
    out.s *= c.powf(T::one() - a);
    Ok((out, c))
}
