//! Low-rank sum projection and PSI-LoRA optimizers.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file pin the common `f64` instantiations.
//!
//! * [`linalg`]: SPD solves, truncated SVD oracle, projectors.
//! * [`lorsum`]: proximal ALS projection of an unmaterialized sum `Σ cⱼUⱼVⱼᵀ`.
//! * [`florsum`]: diagonal Kronecker statistics and the metric-weighted projection.
//! * [`optimizer`]: PSI-LoRA, Scaled PSI-LoRA, baselines and momentum variants.
//! * [`tasks`]: synthetic linear task, toy MLP, experiment runner.
//! * [`ddp`]: sequential simulation of data-parallel workers.

pub mod ddp;
pub mod error;
pub mod florsum;
pub mod linalg;
pub mod lorsum;
pub mod optimizer;
pub mod rng;
pub mod scalar;
pub mod tasks;

pub use error::{Error, Result};
pub use florsum::{
    f_lorsum_half_update, f_lorsum_iterates, f_lorsum_project, kfac_diagonals, materialize_preconditioned,
    metric_factors, shampoo_diagonals, whitened_oracle, KroneckerStats, MetricPair, Side, StatsKind,
};
pub use linalg::{
    balanced_factors, column_projector, full_svd, rank_r_projection, spd_solve, spd_solve_detailed, spd_solve_strict,
    truncated_svd, SolvePath, SvdTriple,
};
pub use lorsum::{
    lorsum_iterates, lorsum_jacobi_step, lorsum_project, materialize, precond_lora_update, ridge_als_project, AlsConfig,
    AlsMode, Factors, LowRankSum, LowRankTerm, Regularizer, UpdateOrder,
};
pub use optimizer::{
    capture_grad_factors, clip_grad_factors, psilora_step, resolve_rho, scaled_psilora_step, state_size, svdlora_step,
    AdapterOptimizer, GradFactor, LayerDims, LoraAdapter, MomentumState, MomentumVariant, OptimizerKind, PsiLoraConfig,
    ScaleConvention,
};
pub use scalar::Scalar;

pub type Matrix = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;
pub type Term = LowRankTerm<f64>;
pub type Sum = LowRankSum<f64>;
pub type Config = AlsConfig<f64>;
pub type Metrics = MetricPair<f64>;
pub type Stats = KroneckerStats<f64>;
pub type Svd = SvdTriple<f64>;
pub type Adapter = optimizer::LoraAdapter<f64>;
pub type Gradient = optimizer::GradFactor<f64>;
pub type Momentum = optimizer::MomentumState<f64>;

pub type Matrix32 = nalgebra::DMatrix<f32>;
pub type Term32 = LowRankTerm<f32>;
pub type Sum32 = LowRankSum<f32>;
pub type Adapter32 = optimizer::LoraAdapter<f32>;
