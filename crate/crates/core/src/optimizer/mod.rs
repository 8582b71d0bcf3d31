//! PSI-LoRA optimizers, their momentum variants, and the baselines they are
//! compared against.

mod adapter;
mod baselines;
mod grad;
mod momentum;
mod step;

pub use adapter::LoraAdapter;
pub use baselines::{
    state_size, svdlora_step, AdapterOptimizer, LayerDims, LoraAdam, LoraSgd, OptimizerKind, PsiLora, RpLora,
    ScaledPsiLora, StepReport, SvdLora,
};
pub use grad::{capture_grad_factors, clip_grad_factors, GradFactor, ScaleConvention};
pub use momentum::{
    update_momentum_lorsum, update_momentum_naive, update_momentum_projected, MomentumState, MomentumVariant,
};
pub use step::{psilora_step, resolve_rho, scaled_psilora_step, scaled_step_with_metrics, PsiLoraConfig};
