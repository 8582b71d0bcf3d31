//! Momentum buffers for the PSI-LoRA steps.
//!
//! * `Naive` accumulates preconditioned factor gradients `G_U (VᵀV)⁻¹`; the
//!   stored inverse Grams go stale once `V` moves.
//! * `Projected` re-expresses the old buffer in the current `V` before adding.
//! * `Lorsum` keeps a rank-`r_m` weight-space buffer `U_m V_mᵀ` refreshed by a
//!   LorSum projection of `decay·ℳ + weight·G`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::spd_solve_strict;
use crate::lorsum::{lorsum_project, AlsConfig, LowRankSum, LowRankTerm};
use crate::rng::{gaussian_matrix, StreamRng};
use crate::scalar::Scalar;

use super::adapter::LoraAdapter;
use super::grad::GradFactor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentumVariant {
    Naive,
    Projected,
    #[default]
    Lorsum,
}

/// Momentum buffer.
///
/// For `Lorsum`, `ℳ = u vᵀ` with `u: d_out×r_m`, `v: d_in×r_m`. For `Naive`
/// and `Projected`, `u` is the factor-space buffer (`d_out×r`) and `v` the
/// adapter `V` it was last updated against.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState<T: Scalar> {
    pub variant: MomentumVariant,
    pub u: DMatrix<T>,
    pub v: DMatrix<T>,
}

impl<T: Scalar> MomentumState<T> {
    /// Zero rank-`r_m` buffer. `U_m = 0` and `V_m` is Gaussian so the first
    /// U-first projection does not get stuck at zero.
    pub fn lorsum(d_out: usize, d_in: usize, r_m: usize, rng: &mut StreamRng) -> Result<Self> {
        if r_m == 0 || r_m > d_out.min(d_in) {
            return invalid(format!("momentum rank {r_m} outside 1..={}", d_out.min(d_in)));
        }
        Ok(Self {
            variant: MomentumVariant::Lorsum,
            u: DMatrix::zeros(d_out, r_m),
            v: gaussian_matrix(rng, d_in, r_m, 1.0 / (d_in as f64).sqrt()),
        })
    }

    /// Zero factor-space buffer for the naive or projected variant.
    pub fn factor_space(variant: MomentumVariant, adapter: &LoraAdapter<T>) -> Result<Self> {
        if variant == MomentumVariant::Lorsum {
            return invalid("use MomentumState::lorsum for the low-rank variant");
        }
        Ok(Self {
            variant,
            u: DMatrix::zeros(adapter.d_out(), adapter.rank()),
            v: adapter.v.clone(),
        })
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    /// Stored scalars.
    pub fn state_len(&self) -> usize {
        self.u.len() + self.v.len()
    }

    /// The buffer as a weight-space term `coeff · ℳ` for the current adapter.
    pub fn weight_term(&self, adapter: &LoraAdapter<T>, coeff: T) -> LowRankTerm<T> {
        let v = match self.variant {
            MomentumVariant::Naive => adapter.v.clone(),
            MomentumVariant::Projected | MomentumVariant::Lorsum => self.v.clone(),
        };
        LowRankTerm::new(coeff, self.u.clone(), v)
    }

    /// Dense weight-space buffer. Oracle use only.
    pub fn dense(&self, adapter: &LoraAdapter<T>) -> DMatrix<T> {
        let t = self.weight_term(adapter, T::one());
        &t.u * t.v.transpose()
    }

    fn expect(&self, variant: MomentumVariant) -> Result<()> {
        if self.variant != variant {
            return invalid(format!("expected {variant:?} momentum, got {:?}", self.variant));
        }
        Ok(())
    }
}

/// `(VᵀV)⁻¹` applied from the right.
fn right_inverse_gram<T: Scalar>(m: &DMatrix<T>, v: &DMatrix<T>) -> Result<DMatrix<T>> {
    let gram = v.tr_mul(v);
    Ok(spd_solve_strict(&gram, &m.transpose())?.transpose())
}

/// `ℳ' = G_U (VᵀV)⁻¹ + α ℳ` with `G_U = G V`.
pub fn update_momentum_naive<T: Scalar>(
    m: &MomentumState<T>,
    gf: &GradFactor<T>,
    adapter: &LoraAdapter<T>,
    alpha: T,
) -> Result<MomentumState<T>> {
    naive_weighted(m, gf, adapter, alpha, T::one())
}

pub(crate) fn naive_weighted<T: Scalar>(
    m: &MomentumState<T>,
    gf: &GradFactor<T>,
    adapter: &LoraAdapter<T>,
    decay: T,
    weight: T,
) -> Result<MomentumState<T>> {
    m.expect(MomentumVariant::Naive)?;
    adapter.check_grad(gf.d_out(), gf.d_in())?;
    let pre = right_inverse_gram(&(gf.times_in(&adapter.v) * weight), &adapter.v)?;
    Ok(MomentumState { variant: m.variant, u: pre + &m.u * decay, v: adapter.v.clone() })
}

/// `ℳ' = (G V + α ℳ V_prevᵀ V)(VᵀV)⁻¹`, so that `ℳ'Vᵀ = (G + αℳV_prevᵀ) 𝒫_V`.
pub fn update_momentum_projected<T: Scalar>(
    m: &MomentumState<T>,
    gf: &GradFactor<T>,
    adapter: &LoraAdapter<T>,
    alpha: T,
) -> Result<MomentumState<T>> {
    projected_weighted(m, gf, adapter, alpha, T::one())
}

pub(crate) fn projected_weighted<T: Scalar>(
    m: &MomentumState<T>,
    gf: &GradFactor<T>,
    adapter: &LoraAdapter<T>,
    decay: T,
    weight: T,
) -> Result<MomentumState<T>> {
    m.expect(MomentumVariant::Projected)?;
    adapter.check_grad(gf.d_out(), gf.d_in())?;
    let v = &adapter.v;
    let carried = &m.u * (m.v.tr_mul(v) * decay);
    let rhs = gf.times_in(v) * weight + carried;
    Ok(MomentumState { variant: m.variant, u: right_inverse_gram(&rhs, v)?, v: v.clone() })
}

/// `ℳ' = LorSum(decay·ℳ + weight·G)` warm-started at the current factors.
///
/// `decay = α, weight = 1` gives the additive recursion; `decay = β₁,
/// weight = 1 − β₁` the EMA.
pub fn update_momentum_lorsum<T: Scalar>(
    m: &MomentumState<T>,
    gf: &GradFactor<T>,
    decay: T,
    weight: T,
    config: &AlsConfig<T>,
) -> Result<MomentumState<T>> {
    m.expect(MomentumVariant::Lorsum)?;
    if (gf.d_out(), gf.d_in()) != (m.u.nrows(), m.v.nrows()) {
        return invalid("gradient and momentum shapes differ");
    }
    let sum = LowRankSum::new(vec![LowRankTerm::new(decay, m.u.clone(), m.v.clone()), gf.term(weight)])?;
    let (u, v) = lorsum_project(&sum, config)?;
    Ok(MomentumState { variant: m.variant, u, v })
}

/// Dispatches on the buffer's variant.
pub(crate) fn update_momentum<T: Scalar>(
    m: &MomentumState<T>,
    gf: &GradFactor<T>,
    adapter: &LoraAdapter<T>,
    decay: T,
    weight: T,
    config: &AlsConfig<T>,
) -> Result<MomentumState<T>> {
    match m.variant {
        MomentumVariant::Naive => naive_weighted(m, gf, adapter, decay, weight),
        MomentumVariant::Projected => projected_weighted(m, gf, adapter, decay, weight),
        MomentumVariant::Lorsum => update_momentum_lorsum(m, gf, decay, weight, config),
    }
}
