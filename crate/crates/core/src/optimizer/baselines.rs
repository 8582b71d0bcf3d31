//! Optimizer objects with a common stepping interface, including the
//! LoRA baselines and the dense SVDLoRA oracle.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::florsum::KroneckerStats;
use crate::linalg::{all_finite, balanced_factors, truncated_svd};
use crate::lorsum::precondition;
use crate::scalar::{cast, Scalar};

use super::adapter::LoraAdapter;
use super::grad::GradFactor;
use super::momentum::MomentumState;
use super::step::{psilora_step, resolve_rho, scaled_psilora_step, PsiLoraConfig};

/// `Π_r(W − ηΔ)` by truncated SVD.
pub fn svdlora_step<T: Scalar>(dense_w: &DMatrix<T>, step: &DMatrix<T>, eta: T, r: usize) -> Result<DMatrix<T>> {
    if dense_w.shape() != step.shape() {
        return invalid("weight and step shapes differ");
    }
    Ok(truncated_svd(&(dense_w - step * eta), r)?.reconstruct())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "lora-sgd")]
    LoraSgd,
    #[serde(rename = "lora-adam")]
    LoraAdam,
    #[serde(rename = "rplora")]
    RpLora,
    #[serde(rename = "svdlora")]
    SvdLora,
    #[serde(rename = "psilora")]
    PsiLora,
    #[serde(rename = "scaled-psilora")]
    ScaledPsiLora,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 6] = [
        OptimizerKind::LoraSgd,
        OptimizerKind::LoraAdam,
        OptimizerKind::RpLora,
        OptimizerKind::SvdLora,
        OptimizerKind::PsiLora,
        OptimizerKind::ScaledPsiLora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::LoraSgd => "lora-sgd",
            OptimizerKind::LoraAdam => "lora-adam",
            OptimizerKind::RpLora => "rplora",
            OptimizerKind::SvdLora => "svdlora",
            OptimizerKind::PsiLora => "psilora",
            OptimizerKind::ScaledPsiLora => "scaled-psilora",
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown optimizer '{s}'")))
    }
}

/// Shape of one adapted layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub d_in: usize,
    pub d_out: usize,
    pub r: usize,
    pub r_m: usize,
}

/// Extra optimizer-state element counts per method.
pub fn state_size(kind: OptimizerKind, dims: LayerDims) -> usize {
    let side = dims.d_in + dims.d_out;
    match kind {
        OptimizerKind::LoraSgd | OptimizerKind::RpLora => dims.r * side,
        OptimizerKind::LoraAdam => 2 * dims.r * side,
        OptimizerKind::SvdLora => 2 * dims.d_in * dims.d_out,
        OptimizerKind::PsiLora => dims.r_m * side,
        OptimizerKind::ScaledPsiLora => (dims.r_m + 1) * side,
    }
}

/// What a step reports besides the updated adapter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport<T> {
    /// Proximal parameter used, for the projection methods.
    pub rho: Option<T>,
}

/// A stateful optimizer for one adapter.
pub trait AdapterOptimizer<T: Scalar> {
    /// Updates `adapter` in place. On error the adapter is left untouched.
    fn step(&mut self, adapter: &mut LoraAdapter<T>, gf: &GradFactor<T>) -> Result<StepReport<T>>;

    /// Number of optimizer-state scalars currently held.
    fn state_len(&self) -> usize;

    fn kind(&self) -> OptimizerKind;
}

fn factor_grads<T: Scalar>(adapter: &LoraAdapter<T>, gf: &GradFactor<T>) -> Result<(DMatrix<T>, DMatrix<T>)> {
    adapter.check_grad(gf.d_out(), gf.d_in())?;
    Ok((gf.times_in(&adapter.v), gf.transpose_times_out(&adapter.u)))
}

fn commit<T: Scalar>(adapter: &mut LoraAdapter<T>, u: DMatrix<T>, v: DMatrix<T>) -> Result<()> {
    if !(all_finite(&u) && all_finite(&v)) {
        return Err(Error::NonFinite("adapter after step".into()));
    }
    adapter.u = u;
    adapter.v = v;
    Ok(())
}

/// SGD with heavy-ball momentum on the factors.
#[derive(Debug, Clone)]
pub struct LoraSgd<T: Scalar> {
    pub eta: T,
    pub alpha: T,
    m_u: DMatrix<T>,
    m_v: DMatrix<T>,
}

impl<T: Scalar> LoraSgd<T> {
    pub fn new(adapter: &LoraAdapter<T>, eta: T, alpha: T) -> Self {
        Self {
            eta,
            alpha,
            m_u: DMatrix::zeros(adapter.d_out(), adapter.rank()),
            m_v: DMatrix::zeros(adapter.d_in(), adapter.rank()),
        }
    }
}

impl<T: Scalar> AdapterOptimizer<T> for LoraSgd<T> {
    fn step(&mut self, adapter: &mut LoraAdapter<T>, gf: &GradFactor<T>) -> Result<StepReport<T>> {
        let (g_u, g_v) = factor_grads(adapter, gf)?;
        let m_u = &self.m_u * self.alpha + g_u;
        let m_v = &self.m_v * self.alpha + g_v;
        commit(adapter, &adapter.u - &m_u * self.eta, &adapter.v - &m_v * self.eta)?;
        self.m_u = m_u;
        self.m_v = m_v;
        Ok(StepReport { rho: None })
    }

    fn state_len(&self) -> usize {
        self.m_u.len() + self.m_v.len()
    }

    fn kind(&self) -> OptimizerKind {
        OptimizerKind::LoraSgd
    }
}

/// Adam on the factors, with bias correction.
#[derive(Debug, Clone)]
pub struct LoraAdam<T: Scalar> {
    pub eta: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: [DMatrix<T>; 2],
    v: [DMatrix<T>; 2],
    t: i32,
}

impl<T: Scalar> LoraAdam<T> {
    pub fn new(adapter: &LoraAdapter<T>, eta: T, beta1: T, beta2: T) -> Self {
        let zu = DMatrix::zeros(adapter.d_out(), adapter.rank());
        let zv = DMatrix::zeros(adapter.d_in(), adapter.rank());
        Self {
            eta,
            beta1,
            beta2,
            eps: cast(1e-8),
            m: [zu.clone(), zv.clone()],
            v: [zu, zv],
            t: 0,
        }
    }
}

impl<T: Scalar> AdapterOptimizer<T> for LoraAdam<T> {
    fn step(&mut self, adapter: &mut LoraAdapter<T>, gf: &GradFactor<T>) -> Result<StepReport<T>> {
        let (g_u, g_v) = factor_grads(adapter, gf)?;
        let t = self.t + 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(t);
        let c2 = one - self.beta2.powi(t);
        let mut m = self.m.clone();
        let mut v = self.v.clone();
        let mut out = [adapter.u.clone(), adapter.v.clone()];
        for (i, g) in [g_u, g_v].into_iter().enumerate() {
            m[i] = &m[i] * self.beta1 + &g * (one - self.beta1);
            v[i] = &v[i] * self.beta2 + g.component_mul(&g) * (one - self.beta2);
            let (mi, vi) = (&m[i], &v[i]);
            out[i].zip_zip_apply(mi, vi, |w, a, b| *w -= self.eta * (a / c1) / ((b / c2).sqrt() + self.eps));
        }
        let [u, vv] = out;
        commit(adapter, u, vv)?;
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(StepReport { rho: None })
    }

    fn state_len(&self) -> usize {
        self.m.iter().chain(self.v.iter()).map(DMatrix::len).sum()
    }

    fn kind(&self) -> OptimizerKind {
        OptimizerKind::LoraAdam
    }
}

/// Preconditioned factor updates `G_U(VᵀV + λI)⁻¹`, `G_V(UᵀU + λI)⁻¹` with
/// heavy-ball momentum on the preconditioned directions.
#[derive(Debug, Clone)]
pub struct RpLora<T: Scalar> {
    pub eta: T,
    pub alpha: T,
    pub lambda: T,
    m_u: DMatrix<T>,
    m_v: DMatrix<T>,
}

impl<T: Scalar> RpLora<T> {
    pub fn new(adapter: &LoraAdapter<T>, eta: T, alpha: T, lambda: T) -> Self {
        Self {
            eta,
            alpha,
            lambda,
            m_u: DMatrix::zeros(adapter.d_out(), adapter.rank()),
            m_v: DMatrix::zeros(adapter.d_in(), adapter.rank()),
        }
    }
}

impl<T: Scalar> AdapterOptimizer<T> for RpLora<T> {
    fn step(&mut self, adapter: &mut LoraAdapter<T>, gf: &GradFactor<T>) -> Result<StepReport<T>> {
        let (g_u, g_v) = factor_grads(adapter, gf)?;
        let neg_du = precondition(&g_u, &adapter.v, self.lambda)?;
        let neg_dv = precondition(&g_v, &adapter.u, self.lambda)?;
        let m_u = &self.m_u * self.alpha + neg_du;
        let m_v = &self.m_v * self.alpha + neg_dv;
        commit(adapter, &adapter.u - &m_u * self.eta, &adapter.v - &m_v * self.eta)?;
        self.m_u = m_u;
        self.m_v = m_v;
        Ok(StepReport { rho: None })
    }

    fn state_len(&self) -> usize {
        self.m_u.len() + self.m_v.len()
    }

    fn kind(&self) -> OptimizerKind {
        OptimizerKind::RpLora
    }
}

/// Dense projected gradient descent: `W ← Π_r(W − ηℳ)`, `ℳ ← αℳ + G`.
///
/// Holds the dense weight and a dense momentum buffer; the adapter receives
/// balanced factors of `W` after each step.
#[derive(Debug, Clone)]
pub struct SvdLora<T: Scalar> {
    pub eta: T,
    pub alpha: T,
    w: DMatrix<T>,
    m: DMatrix<T>,
}

impl<T: Scalar> SvdLora<T> {
    pub fn new(adapter: &LoraAdapter<T>, eta: T, alpha: T) -> Self {
        Self { eta, alpha, w: adapter.delta(), m: DMatrix::zeros(adapter.d_out(), adapter.d_in()) }
    }

    pub fn weight(&self) -> &DMatrix<T> {
        &self.w
    }
}

impl<T: Scalar> AdapterOptimizer<T> for SvdLora<T> {
    fn step(&mut self, adapter: &mut LoraAdapter<T>, gf: &GradFactor<T>) -> Result<StepReport<T>> {
        adapter.check_grad(gf.d_out(), gf.d_in())?;
        let m = &self.m * self.alpha + gf.dense();
        if !all_finite(&m) {
            return Err(Error::NonFinite("dense momentum".into()));
        }
        let triple = truncated_svd(&(&self.w - &m * self.eta), adapter.rank()).map_err(|e| match e {
            Error::InvalidInput(msg) => Error::NonFinite(msg),
            e => e,
        })?;
        let (u, v) = balanced_factors(&triple);
        commit(adapter, u, v)?;
        self.w = triple.reconstruct();
        self.m = m;
        Ok(StepReport { rho: None })
    }

    fn state_len(&self) -> usize {
        self.w.len() + self.m.len()
    }

    fn kind(&self) -> OptimizerKind {
        OptimizerKind::SvdLora
    }
}

/// [`psilora_step`] with owned momentum.
#[derive(Debug, Clone)]
pub struct PsiLora<T: Scalar> {
    pub config: PsiLoraConfig<T>,
    pub momentum: MomentumState<T>,
}

impl<T: Scalar> AdapterOptimizer<T> for PsiLora<T> {
    fn step(&mut self, adapter: &mut LoraAdapter<T>, gf: &GradFactor<T>) -> Result<StepReport<T>> {
        let (a, m) = psilora_step(adapter, gf, &self.momentum, &self.config)?;
        *adapter = a;
        self.momentum = m;
        Ok(StepReport { rho: Some(resolve_rho(&self.config, self.config.eta)) })
    }

    fn state_len(&self) -> usize {
        self.momentum.state_len()
    }

    fn kind(&self) -> OptimizerKind {
        OptimizerKind::PsiLora
    }
}

/// [`scaled_psilora_step`] with owned momentum and statistics.
#[derive(Debug, Clone)]
pub struct ScaledPsiLora<T: Scalar> {
    pub config: PsiLoraConfig<T>,
    pub momentum: MomentumState<T>,
    pub stats: KroneckerStats<T>,
}

impl<T: Scalar> AdapterOptimizer<T> for ScaledPsiLora<T> {
    fn step(&mut self, adapter: &mut LoraAdapter<T>, gf: &GradFactor<T>) -> Result<StepReport<T>> {
        let (a, m, s) = scaled_psilora_step(adapter, gf, &self.momentum, &self.stats, &self.config)?;
        *adapter = a;
        self.momentum = m;
        self.stats = s;
        Ok(StepReport { rho: Some(resolve_rho(&self.config, self.config.eta)) })
    }

    fn state_len(&self) -> usize {
        self.momentum.state_len() + self.stats.state_len()
    }

    fn kind(&self) -> OptimizerKind {
        OptimizerKind::ScaledPsiLora
    }
}
