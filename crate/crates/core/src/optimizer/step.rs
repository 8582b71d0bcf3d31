//! PSI-LoRA and Scaled PSI-LoRA steps.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::florsum::{f_lorsum_project, metric_factors, KroneckerStats, MetricPair, StatsKind};
use crate::linalg::all_finite;
use crate::lorsum::{lorsum_project, AlsConfig, LowRankSum, UpdateOrder, MAX_INNER_ITERS};
use crate::scalar::{cast, Scalar};

use super::adapter::LoraAdapter;
use super::grad::{clip_grad_factors, GradFactor};
use super::momentum::{update_momentum, MomentumState, MomentumVariant};

/// Hyperparameters shared by both PSI-LoRA steps.
///
/// `momentum` is the additive factor α for [`psilora_step`] and the EMA
/// factor β₁ for [`scaled_psilora_step`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiLoraConfig<T> {
    pub eta: T,
    /// `ρ/η`.
    pub theta: T,
    pub rho_floor: T,
    /// Fixed ρ, bypassing `θη`.
    pub rho: Option<T>,
    pub momentum: T,
    pub beta2: T,
    pub gamma: T,
    pub delta: T,
    pub inner_iters: usize,
    pub clip_max_norm: Option<T>,
    pub clip_split_a: T,
    pub stats_kind: StatsKind,
    pub order: UpdateOrder,
    pub momentum_variant: MomentumVariant,
}

impl<T: Scalar> Default for PsiLoraConfig<T> {
    fn default() -> Self {
        Self {
            eta: cast(0.2),
            theta: cast(1e-2),
            rho_floor: cast(1e-5),
            rho: None,
            momentum: cast(0.9),
            beta2: cast(0.99),
            gamma: cast(0.5),
            delta: cast(1e-5),
            inner_iters: 1,
            clip_max_norm: None,
            clip_split_a: T::one(),
            stats_kind: StatsKind::Kfac,
            order: UpdateOrder::UFirst,
            momentum_variant: MomentumVariant::Lorsum,
        }
    }
}

impl<T: Scalar> PsiLoraConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, x: T| {
            if x.is_finite() && x >= T::zero() {
                Ok(())
            } else {
                invalid(format!("{name} must be finite and >= 0, got {x}"))
            }
        };
        nonneg("eta", self.eta)?;
        nonneg("theta", self.theta)?;
        nonneg("rho_floor", self.rho_floor)?;
        nonneg("delta", self.delta)?;
        if let Some(r) = self.rho {
            nonneg("rho", r)?;
        }
        if !(self.momentum >= T::zero() && self.momentum <= T::one()) {
            return invalid(format!("momentum must lie in [0, 1], got {}", self.momentum));
        }
        if !(self.beta2 >= T::zero() && self.beta2 < T::one()) {
            return invalid(format!("beta2 must lie in [0, 1), got {}", self.beta2));
        }
        if !(self.gamma > T::zero() && self.gamma <= T::one()) {
            return invalid(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if self.inner_iters == 0 || self.inner_iters > MAX_INNER_ITERS {
            return invalid(format!("inner_iters must be in 1..={MAX_INNER_ITERS}, got {}", self.inner_iters));
        }
        if let Some(c) = self.clip_max_norm {
            if !(c > T::zero() && c.is_finite()) {
                return invalid(format!("clip_max_norm must be positive, got {c}"));
            }
        }
        if !(self.clip_split_a >= T::zero() && self.clip_split_a <= T::one()) {
            return invalid(format!("clip_split_a must lie in [0, 1], got {}", self.clip_split_a));
        }
        Ok(())
    }

    /// Inner ALS configuration at learning rate `eta_t`.
    pub fn als(&self, eta_t: T) -> AlsConfig<T> {
        AlsConfig::proximal(self.inner_iters, resolve_rho(self, eta_t)).with_order(self.order)
    }
}

/// `ρ = max(θ·η_t, ρ_floor)`, or the fixed `rho` when one is configured.
pub fn resolve_rho<T: Scalar>(config: &PsiLoraConfig<T>, eta_t: T) -> T {
    match config.rho {
        Some(r) => r,
        None => (config.theta * eta_t).max(config.rho_floor),
    }
}

/// Treats a non-finite intermediate as divergence rather than bad input.
fn as_divergence(e: Error) -> Error {
    match e {
        Error::InvalidInput(m) if m.contains("non-finite") => Error::NonFinite(m),
        e => e,
    }
}

fn ensure_finite_output<T: Scalar>(m: &DMatrix<T>, what: &str) -> Result<()> {
    if all_finite(m) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn check_inputs<T: Scalar>(adapter: &LoraAdapter<T>, gf: &GradFactor<T>, m: &MomentumState<T>) -> Result<()> {
    adapter.check_grad(gf.d_out(), gf.d_in())?;
    if !(all_finite(&gf.x) && all_finite(&gf.s)) {
        return Err(Error::NonFinite("gradient factors".into()));
    }
    if !(all_finite(&adapter.u) && all_finite(&adapter.v)) {
        return Err(Error::NonFinite("adapter factors".into()));
    }
    if m.u.nrows() != adapter.d_out() || m.v.nrows() != adapter.d_in() {
        return invalid("momentum shape does not match the adapter");
    }
    Ok(())
}

fn finish<T: Scalar>(adapter: &LoraAdapter<T>, u: DMatrix<T>, v: DMatrix<T>, m: MomentumState<T>) -> Result<(LoraAdapter<T>, MomentumState<T>)> {
    ensure_finite_output(&u, "adapter U after step")?;
    ensure_finite_output(&v, "adapter V after step")?;
    ensure_finite_output(&m.u, "momentum U after step")?;
    ensure_finite_output(&m.v, "momentum V after step")?;
    Ok((LoraAdapter { u, v, base_frozen: adapter.base_frozen.clone() }, m))
}

fn maybe_clip<T: Scalar>(gf: &GradFactor<T>, config: &PsiLoraConfig<T>) -> Result<GradFactor<T>> {
    match config.clip_max_norm {
        Some(c) => Ok(clip_grad_factors(gf, c, config.clip_split_a)?.0),
        None => Ok(gf.clone()),
    }
}

/// One PSI-LoRA step:
///
/// `UVᵀ ← LorSum(UVᵀ − ηG − ηαℳ)` in a single projection, then
/// `ℳ ← LorSum(αℳ + G)` with the same `(K, ρ)`.
pub fn psilora_step<T: Scalar>(
    adapter: &LoraAdapter<T>,
    gf: &GradFactor<T>,
    momentum: &MomentumState<T>,
    config: &PsiLoraConfig<T>,
) -> Result<(LoraAdapter<T>, MomentumState<T>)> {
    config.validate()?;
    check_inputs(adapter, gf, momentum)?;
    let gf = maybe_clip(gf, config)?;
    let eta = config.eta;
    let alpha = config.momentum;
    let als = config.als(eta);

    let sum = LowRankSum::new(vec![
        crate::lorsum::LowRankTerm::new(T::one(), adapter.u.clone(), adapter.v.clone()),
        gf.term(-eta),
        momentum.weight_term(adapter, -eta * alpha),
    ])
    .map_err(as_divergence)?;
    let (u, v) = lorsum_project(&sum, &als).map_err(as_divergence)?;
    let m = update_momentum(momentum, &gf, adapter, alpha, T::one(), &als).map_err(as_divergence)?;
    finish(adapter, u, v, m)
}

/// Scaled PSI-LoRA step: statistics first, then
/// `UVᵀ ← F-LorSum(UVᵀ − η(1−β₁)G − ηβ₁ℳ)` under `((v_s+δ)^γ, (v_x+δ)^γ)`,
/// then the Euclidean `ℳ ← LorSum(β₁ℳ + (1−β₁)G)`.
///
/// Clipping, when configured, happens before the statistics update so the
/// curvature estimates see the clipped factors.
pub fn scaled_psilora_step<T: Scalar>(
    adapter: &LoraAdapter<T>,
    gf: &GradFactor<T>,
    momentum: &MomentumState<T>,
    stats: &KroneckerStats<T>,
    config: &PsiLoraConfig<T>,
) -> Result<(LoraAdapter<T>, MomentumState<T>, KroneckerStats<T>)> {
    config.validate()?;
    check_inputs(adapter, gf, momentum)?;
    let gf = maybe_clip(gf, config)?;
    let mut stats = stats.clone();
    stats.update(&gf.x, &gf.s).map_err(as_divergence)?;
    let metrics = metric_factors(&stats, config.delta, config.gamma).map_err(as_divergence)?;
    let (a, m) = scaled_step_with_metrics(adapter, &gf, momentum, &metrics, config)?;
    Ok((a, m, stats))
}

/// The projection part of [`scaled_psilora_step`] under given metrics.
/// No clipping or statistics update happens here.
pub fn scaled_step_with_metrics<T: Scalar>(
    adapter: &LoraAdapter<T>,
    gf: &GradFactor<T>,
    momentum: &MomentumState<T>,
    metrics: &MetricPair<T>,
    config: &PsiLoraConfig<T>,
) -> Result<(LoraAdapter<T>, MomentumState<T>)> {
    config.validate()?;
    check_inputs(adapter, gf, momentum)?;
    let eta = config.eta;
    let beta1 = config.momentum;
    let als = config.als(eta);
    let anchor = crate::lorsum::LowRankTerm::new(T::one(), adapter.u.clone(), adapter.v.clone());
    let steps = [gf.term(-eta * (T::one() - beta1)), momentum.weight_term(adapter, -eta * beta1)];
    let (u, v) = f_lorsum_project(&anchor, &steps, metrics, &als).map_err(as_divergence)?;
    let m = update_momentum(momentum, gf, adapter, beta1, T::one() - beta1, &als).map_err(as_divergence)?;
    finish(adapter, u, v, m)
}
