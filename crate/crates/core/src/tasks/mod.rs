//! Desk-scale workloads and the experiment runner.

mod experiment;
mod linear;
mod mlp;

pub use experiment::{
    aggregate, build_optimizer, run_experiment, run_seed, Aggregate, ExperimentConfig, ExperimentResult, MetricRecord,
    RunStatus, SeedTrace, Summary, TaskKind,
};
pub use linear::{
    gen_linear_task, linear_grad_factors, linear_loss, linear_optimum, sample_columns, BatchSelection, LinearBatch,
    LinearTaskSpec,
};
pub use mlp::{gather_batch, gen_mlp_task, mlp_forward_backward, InitMode, MlpData, MlpGrads, MlpModel, MlpTaskSpec};
