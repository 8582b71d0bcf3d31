//! Synthetic matrix-fitting task `min ½‖UVᵀ − W‖²_F`.

use nalgebra::DMatrix;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::full_svd;
use crate::optimizer::{GradFactor, LoraAdapter, ScaleConvention};
use crate::rng::{gaussian_matrix, named_rng, StreamRng};
use crate::scalar::{cast, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearBatch {
    Full,
    /// Columns sampled without replacement, fresh every step.
    Columns(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearTaskSpec {
    pub d_out: usize,
    pub d_in: usize,
    pub rank: usize,
    pub batch: LinearBatch,
    pub seed: u64,
}

impl Default for LinearTaskSpec {
    fn default() -> Self {
        Self { d_out: 600, d_in: 200, rank: 8, batch: LinearBatch::Full, seed: 0 }
    }
}

/// Column subset used for one gradient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BatchSelection {
    Full,
    Columns(Vec<usize>),
}

/// Gaussian target `W` and the LoRA initialization `U = 0`, `V ~ N(0, 1/d_in)`.
pub fn gen_linear_task<T: Scalar>(spec: &LinearTaskSpec) -> Result<(DMatrix<T>, LoraAdapter<T>)> {
    if spec.rank == 0 || spec.rank > spec.d_out.min(spec.d_in) {
        return invalid(format!("rank {} outside 1..={}", spec.rank, spec.d_out.min(spec.d_in)));
    }
    if let LinearBatch::Columns(b) = spec.batch {
        if b == 0 || b > spec.d_in {
            return invalid(format!("column batch {b} outside 1..={}", spec.d_in));
        }
    }
    let w = gaussian_matrix(&mut named_rng(spec.seed, "linear/target"), spec.d_out, spec.d_in, 1.0);
    let adapter = LoraAdapter::lora_init(spec.d_out, spec.d_in, spec.rank, &mut named_rng(spec.seed, "linear/init"))?;
    Ok((w, adapter))
}

/// `½‖UVᵀ − W‖²_F`.
pub fn linear_loss<T: Scalar>(adapter: &LoraAdapter<T>, w: &DMatrix<T>) -> T {
    (adapter.delta() - w).norm_squared() * cast::<T>(0.5)
}

/// Best achievable loss at rank `r`: `½ Σ_{i>r} σᵢ²`.
pub fn linear_optimum<T: Scalar>(w: &DMatrix<T>, r: usize) -> Result<T> {
    let svd = full_svd(w)?;
    let tail = svd.singular.iter().skip(r).fold(T::zero(), |acc, &s| acc + s * s);
    Ok(tail * cast::<T>(0.5))
}

/// Draws `b` distinct column indices.
pub fn sample_columns(rng: &mut StreamRng, n: usize, b: usize) -> Vec<usize> {
    index::sample(rng, n, b).into_vec()
}

/// Casts the (mini-batch) gradient of the linear loss into `(X, S)` form.
///
/// Full batch: `X = I`, `S = Rᵀ` with `R = UVᵀ − W`. Column batch of size
/// `b`: row `k` of `X` is `(d_in/b)·e_jₖᵀ` and row `k` of `S` is `R eⱼₖ`, an
/// unbiased estimate of the full gradient.
pub fn linear_grad_factors<T: Scalar>(
    adapter: &LoraAdapter<T>,
    w: &DMatrix<T>,
    selection: &BatchSelection,
) -> Result<GradFactor<T>> {
    let (m, n) = w.shape();
    adapter.check_grad(m, n)?;
    match selection {
        BatchSelection::Full => {
            let residual = adapter.delta() - w;
            GradFactor::new(DMatrix::identity(n, n), residual.transpose(), ScaleConvention::Sum)
        }
        BatchSelection::Columns(cols) => {
            if cols.is_empty() {
                return invalid("empty column batch");
            }
            if let Some(&bad) = cols.iter().find(|&&j| j >= n) {
                return invalid(format!("column {bad} out of range for {n} columns"));
            }
            let b = cols.len();
            let scale: T = cast(n as f64 / b as f64);
            let mut x = DMatrix::zeros(b, n);
            let mut s = DMatrix::zeros(b, m);
            for (k, &j) in cols.iter().enumerate() {
                x[(k, j)] = scale;
                let col = &adapter.u * adapter.v.row(j).transpose() - w.column(j);
                s.row_mut(k).copy_from(&col.transpose());
            }
            GradFactor::new(x, s, ScaleConvention::Mean)
        }
    }
}
