//! Experiment configuration and the multi-seed runner.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ddp::DdpSimulator;
use crate::error::{Error, Result};
use crate::florsum::{KroneckerStats, StatsKind};
use crate::lorsum::{UpdateOrder, MAX_INNER_ITERS};
use crate::optimizer::{
    AdapterOptimizer, LoraAdam, LoraAdapter, LoraSgd, MomentumState, MomentumVariant, OptimizerKind, PsiLora,
    PsiLoraConfig, RpLora, ScaledPsiLora, SvdLora,
};
use crate::rng::named_rng;

use super::linear::{
    gen_linear_task, linear_grad_factors, linear_loss, linear_optimum, sample_columns, BatchSelection, LinearBatch,
    LinearTaskSpec,
};
use super::mlp::{gather_batch, gen_mlp_task, mlp_forward_backward, InitMode, MlpTaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Linear,
    Mlp,
}

/// Flat experiment configuration. Every key is optional in the file; the
/// defaults below fill the rest and unknown keys are rejected.
///
/// `alpha` is the additive momentum of `lora-sgd`, `rplora`, `svdlora` and
/// `psilora`; `beta1` the EMA factor of `scaled-psilora` and `lora-adam`.
/// `gamma` defaults to 0.5 for `kfac` and 0.25 for `shampoo` statistics.
/// Without `batch_size` the linear task is full-batch and the MLP uses 64.
/// Non-adapter MLP parameters (biases) always train by plain SGD at `head_lr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub optimizer: OptimizerKind,
    pub seeds: Vec<u64>,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,

    pub eta: f64,
    pub theta: f64,
    pub rho_floor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub delta: f64,
    pub inner_iters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_max_norm: Option<f64>,
    pub clip_split_a: f64,
    pub stats_kind: StatsKind,
    pub order: UpdateOrder,
    pub momentum_variant: MomentumVariant,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum_rank: Option<usize>,
    pub lambda: f64,
    pub head_lr: f64,

    pub rank: usize,
    pub d_out: usize,
    pub d_in: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,

    pub mlp_input: usize,
    pub mlp_hidden: usize,
    pub mlp_classes: usize,
    pub mlp_samples: usize,
    pub mlp_test_samples: usize,
    pub mlp_separation: f64,
    pub mlp_init: InitMode,

    pub workers: usize,
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Linear,
            optimizer: OptimizerKind::PsiLora,
            seeds: vec![0],
            steps: 100,
            output: None,
            eta: 0.2,
            theta: 1e-2,
            rho_floor: 1e-5,
            rho: None,
            alpha: 0.0,
            beta1: 0.9,
            beta2: 0.99,
            gamma: None,
            delta: 1e-5,
            inner_iters: 1,
            clip_max_norm: None,
            clip_split_a: 1.0,
            stats_kind: StatsKind::Kfac,
            order: UpdateOrder::UFirst,
            momentum_variant: MomentumVariant::Lorsum,
            momentum_rank: None,
            lambda: 1e-6,
            head_lr: 0.1,
            rank: 8,
            d_out: 600,
            d_in: 200,
            batch_size: None,
            mlp_input: 16,
            mlp_hidden: 32,
            mlp_classes: 3,
            mlp_samples: 384,
            mlp_test_samples: 192,
            mlp_separation: 1.0,
            mlp_init: InitMode::Lora,
            workers: 1,
            record_wall_time: false,
        }
    }
}

fn field_err<T>(field: &str, msg: impl std::fmt::Display) -> Result<T> {
    Err(Error::InvalidInput(format!("field `{field}`: {msg}")))
}

fn check(field: &str, ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        field_err(field, msg)
    }
}

impl ExperimentConfig {
    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or_else(|| self.stats_kind.default_gamma())
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        check("seeds", !self.seeds.is_empty(), "at least one seed is required")?;
        check("steps", self.steps >= 1, "must be at least 1")?;
        check("eta", finite_nonneg(self.eta), "must be finite and >= 0")?;
        check("theta", finite_nonneg(self.theta), "must be finite and >= 0")?;
        check("rho_floor", finite_nonneg(self.rho_floor), "must be finite and >= 0")?;
        if let Some(r) = self.rho {
            check("rho", finite_nonneg(r), "must be finite and >= 0")?;
        }
        check("alpha", (0.0..=1.0).contains(&self.alpha), "must lie in [0, 1]")?;
        check("beta1", (0.0..=1.0).contains(&self.beta1), "must lie in [0, 1]")?;
        check("beta2", (0.0..1.0).contains(&self.beta2), "must lie in [0, 1)")?;
        let g = self.gamma();
        check("gamma", g > 0.0 && g <= 1.0, "must lie in (0, 1]")?;
        check("delta", finite_nonneg(self.delta), "must be finite and >= 0")?;
        check(
            "inner_iters",
            (1..=MAX_INNER_ITERS).contains(&self.inner_iters),
            &format!("must lie in 1..={MAX_INNER_ITERS}"),
        )?;
        if let Some(c) = self.clip_max_norm {
            check("clip_max_norm", c > 0.0 && c.is_finite(), "must be positive")?;
        }
        check("clip_split_a", (0.0..=1.0).contains(&self.clip_split_a), "must lie in [0, 1]")?;
        if let Some(r) = self.momentum_rank {
            check("momentum_rank", r >= 1, "must be at least 1")?;
        }
        check("lambda", finite_nonneg(self.lambda), "must be finite and >= 0")?;
        check("head_lr", finite_nonneg(self.head_lr), "must be finite and >= 0")?;
        check("rank", self.rank >= 1, "must be at least 1")?;
        check("workers", self.workers >= 1, "must be at least 1")?;
        match self.task {
            TaskKind::Linear => {
                check("d_out", self.d_out >= 1, "must be positive")?;
                check("d_in", self.d_in >= 1, "must be positive")?;
                check("rank", self.rank <= self.d_out.min(self.d_in), "exceeds min(d_out, d_in)")?;
                if let Some(b) = self.batch_size {
                    check("batch_size", b >= 1 && b <= self.d_in, "must lie in 1..=d_in")?;
                }
            }
            TaskKind::Mlp => {
                self.mlp_spec(0).validate().or_else(|e| field_err("mlp_*", e))?;
                if let Some(b) = self.batch_size {
                    check("batch_size", b >= 1 && b <= self.mlp_samples, "must lie in 1..=mlp_samples")?;
                }
            }
        }
        if self.workers > 1 {
            check(
                "workers",
                matches!(self.optimizer, OptimizerKind::PsiLora | OptimizerKind::ScaledPsiLora),
                "data-parallel runs support psilora and scaled-psilora only",
            )?;
            check("momentum_variant", self.momentum_variant == MomentumVariant::Lorsum, "data-parallel runs need lorsum")?;
            check("clip_max_norm", self.clip_max_norm.is_none(), "not supported with workers > 1")?;
            check(
                "stats_kind",
                self.stats_kind == StatsKind::Kfac || self.optimizer == OptimizerKind::PsiLora,
                "shampoo statistics are not supported with workers > 1",
            )?;
            check("batch_size", self.batch_rows().is_multiple_of(self.workers), "batch rows must divide evenly over workers")?;
        }
        self.psilora_config().validate().or_else(|e| field_err("psilora", e))
    }

    /// Rows of one gradient batch.
    fn batch_rows(&self) -> usize {
        match self.task {
            TaskKind::Linear => self.batch_size.unwrap_or(self.d_in),
            TaskKind::Mlp => self.mlp_batch(),
        }
    }

    fn mlp_batch(&self) -> usize {
        self.batch_size.unwrap_or(64).min(self.mlp_samples)
    }

    pub fn linear_spec(&self, seed: u64) -> LinearTaskSpec {
        LinearTaskSpec {
            d_out: self.d_out,
            d_in: self.d_in,
            rank: self.rank,
            batch: self.batch_size.map_or(LinearBatch::Full, LinearBatch::Columns),
            seed,
        }
    }

    pub fn mlp_spec(&self, seed: u64) -> MlpTaskSpec {
        MlpTaskSpec {
            input_dim: self.mlp_input,
            hidden: self.mlp_hidden,
            classes: self.mlp_classes,
            samples: self.mlp_samples,
            test_samples: self.mlp_test_samples,
            rank: self.rank,
            separation: self.mlp_separation,
            init: self.mlp_init,
            seed,
        }
    }

    /// Step hyperparameters; `momentum` is β₁ for the scaled method and α
    /// otherwise.
    pub fn psilora_config(&self) -> PsiLoraConfig<f64> {
        PsiLoraConfig {
            eta: self.eta,
            theta: self.theta,
            rho_floor: self.rho_floor,
            rho: self.rho,
            momentum: if self.optimizer == OptimizerKind::ScaledPsiLora { self.beta1 } else { self.alpha },
            beta2: self.beta2,
            gamma: self.gamma(),
            delta: self.delta,
            inner_iters: self.inner_iters,
            clip_max_norm: self.clip_max_norm,
            clip_split_a: self.clip_split_a,
            stats_kind: self.stats_kind,
            order: self.order,
            momentum_variant: self.momentum_variant,
        }
    }
}

/// Optimizer for one adapted layer as selected by `config`.
pub fn build_optimizer(
    config: &ExperimentConfig,
    adapter: &LoraAdapter<f64>,
    seed: u64,
    layer: usize,
) -> Result<Box<dyn AdapterOptimizer<f64>>> {
    let (eta, alpha) = (config.eta, config.alpha);
    let opt: Box<dyn AdapterOptimizer<f64>> = match config.optimizer {
        OptimizerKind::LoraSgd => Box::new(LoraSgd::new(adapter, eta, alpha)),
        OptimizerKind::LoraAdam => Box::new(LoraAdam::new(adapter, eta, config.beta1, config.beta2)),
        OptimizerKind::RpLora => Box::new(RpLora::new(adapter, eta, alpha, config.lambda)),
        OptimizerKind::SvdLora => Box::new(SvdLora::new(adapter, eta, alpha)),
        kind @ (OptimizerKind::PsiLora | OptimizerKind::ScaledPsiLora) => {
            let (d_out, d_in) = (adapter.d_out(), adapter.d_in());
            let momentum = match config.momentum_variant {
                MomentumVariant::Lorsum => {
                    let r_m = config.momentum_rank.unwrap_or(adapter.rank()).min(d_out.min(d_in));
                    MomentumState::lorsum(d_out, d_in, r_m, &mut named_rng(seed, &format!("momentum/layer{layer}")))?
                }
                v => MomentumState::factor_space(v, adapter)?,
            };
            let psi = config.psilora_config();
            let stats = match kind {
                OptimizerKind::ScaledPsiLora => Some(KroneckerStats::new(config.stats_kind, config.beta2, d_out, d_in)?),
                _ => None,
            };
            if config.workers > 1 {
                Box::new(DdpSimulator::new(config.workers, adapter.clone(), momentum, stats, psi)?)
            } else {
                match stats {
                    Some(stats) => Box::new(ScaledPsiLora { config: psi, momentum, stats }),
                    None => Box::new(PsiLora { config: psi, momentum }),
                }
            }
        }
    };
    Ok(opt)
}

/// One row of a metric trace. Step 0 is the initial state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub seed: u64,
    /// Full objective: `½‖UVᵀ − W‖²` (linear) or training cross-entropy (MLP).
    pub loss: f64,
    /// Optimality gap (linear) or held-out accuracy (MLP).
    pub eval: f64,
    /// `‖G‖_F` of the gradient used in this step, over all layers.
    pub grad_norm: f64,
    /// Proximal parameter used; 0 for methods without one.
    pub rho_used: f64,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Diverged { step: usize },
    Failed { step: usize, message: String },
}

impl RunStatus {
    pub fn label(&self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::Diverged { .. } => "diverged",
            RunStatus::Failed { .. } => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedTrace {
    pub seed: u64,
    pub records: Vec<MetricRecord>,
    pub status: RunStatus,
}

impl SeedTrace {
    pub fn final_record(&self) -> &MetricRecord {
        self.records.last().expect("trace holds the initial record")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: usize,
    pub final_loss: Summary,
    pub best_loss: Summary,
    pub final_eval: Summary,
    pub best_eval: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub traces: Vec<SeedTrace>,
    pub aggregate: Aggregate,
}

impl ExperimentResult {
    pub fn all_ok(&self) -> bool {
        self.traces.iter().all(|t| t.status == RunStatus::Ok)
    }
}

/// Runs every seed of `config` sequentially and aggregates.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let traces = config.seeds.iter().map(|&s| run_seed(config, s)).collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(config, &traces);
    Ok(ExperimentResult { traces, aggregate })
}

pub fn aggregate(config: &ExperimentConfig, traces: &[SeedTrace]) -> Aggregate {
    let pick = |f: &dyn Fn(&SeedTrace) -> f64| traces.iter().map(f).collect::<Vec<_>>();
    let higher_is_better = config.task == TaskKind::Mlp;
    let best_eval = |t: &SeedTrace| {
        let it = t.records.iter().map(|r| r.eval);
        if higher_is_better {
            it.fold(f64::NEG_INFINITY, f64::max)
        } else {
            it.fold(f64::INFINITY, f64::min)
        }
    };
    Aggregate {
        seeds: traces.len(),
        final_loss: Summary::of(&pick(&|t| t.final_record().loss)),
        best_loss: Summary::of(&pick(&|t| t.records.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min))),
        final_eval: Summary::of(&pick(&|t| t.final_record().eval)),
        best_eval: Summary::of(&pick(&best_eval)),
    }
}

struct Clock {
    start: Option<Instant>,
}

impl Clock {
    fn new(enabled: bool) -> Self {
        Self { start: enabled.then(Instant::now) }
    }

    fn ms(&self) -> f64 {
        self.start.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1e3)
    }
}

/// Outcome classification of a failed step.
fn classify(step: usize, e: Error) -> RunStatus {
    match e {
        Error::NonFinite(_) => RunStatus::Diverged { step },
        e => RunStatus::Failed { step, message: e.to_string() },
    }
}

/// Runs one seed. Numerical failures end the trace with a status; only
/// setup errors are returned as `Err`.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedTrace> {
    match config.task {
        TaskKind::Linear => run_linear(config, seed),
        TaskKind::Mlp => run_mlp(config, seed),
    }
}

fn run_linear(config: &ExperimentConfig, seed: u64) -> Result<SeedTrace> {
    let spec = config.linear_spec(seed);
    let (w, mut adapter) = gen_linear_task::<f64>(&spec)?;
    let optimum = linear_optimum(&w, spec.rank)?;
    let mut opt = build_optimizer(config, &adapter, seed, 0)?;
    let mut batch_rng = named_rng(seed, "linear/batch");
    let clock = Clock::new(config.record_wall_time);

    let loss0 = linear_loss(&adapter, &w);
    let mut records = vec![record(0, seed, loss0, loss0 - optimum, 0.0, 0.0, clock.ms())];
    for step in 1..=config.steps {
        let selection = match spec.batch {
            LinearBatch::Full => BatchSelection::Full,
            LinearBatch::Columns(b) => BatchSelection::Columns(sample_columns(&mut batch_rng, spec.d_in, b)),
        };
        let gf = match linear_grad_factors(&adapter, &w, &selection) {
            Ok(g) => g,
            Err(e) => return Ok(finish(seed, records, classify(step, as_nonfinite(e)))),
        };
        let grad_norm = gf.norm();
        let report = match opt.step(&mut adapter, &gf) {
            Ok(r) => r,
            Err(e) => return Ok(finish(seed, records, classify(step, e))),
        };
        let loss = linear_loss(&adapter, &w);
        records.push(record(step, seed, loss, loss - optimum, grad_norm, report.rho.unwrap_or(0.0), clock.ms()));
        if !loss.is_finite() {
            return Ok(finish(seed, records, RunStatus::Diverged { step }));
        }
    }
    Ok(finish(seed, records, RunStatus::Ok))
}

fn run_mlp(config: &ExperimentConfig, seed: u64) -> Result<SeedTrace> {
    let spec = config.mlp_spec(seed);
    let (data, mut model) = gen_mlp_task::<f64>(&spec)?;
    let mut opts = model
        .layers
        .iter()
        .enumerate()
        .map(|(l, a)| build_optimizer(config, a, seed, l))
        .collect::<Result<Vec<_>>>()?;
    let batch = config.mlp_batch();
    let mut batch_rng = named_rng(seed, "mlp/batch");
    let clock = Clock::new(config.record_wall_time);

    let eval = |m: &super::mlp::MlpModel<f64>| m.accuracy(&data.x_test, &data.y_test);
    let mut records =
        vec![record(0, seed, model.loss(&data.x_train, &data.y_train), eval(&model), 0.0, 0.0, clock.ms())];
    for step in 1..=config.steps {
        let idx = sample_columns(&mut batch_rng, spec.samples, batch);
        let (xb, yb) = gather_batch(&data.x_train, &data.y_train, &idx);
        let grads = match mlp_forward_backward(&model, &xb, &yb) {
            Ok(g) => g,
            Err(e) => return Ok(finish(seed, records, classify(step, as_nonfinite(e)))),
        };
        let grad_norm = grads.factors.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt();
        let mut rho = 0.0;
        for (l, opt) in opts.iter_mut().enumerate() {
            match opt.step(&mut model.layers[l], &grads.factors[l]) {
                Ok(r) => rho = r.rho.unwrap_or(0.0),
                Err(e) => return Ok(finish(seed, records, classify(step, e))),
            }
        }
        for (b, g) in model.biases.iter_mut().zip(&grads.bias_grads) {
            *b -= g * config.head_lr;
        }
        let loss = model.loss(&data.x_train, &data.y_train);
        records.push(record(step, seed, loss, eval(&model), grad_norm, rho, clock.ms()));
        if !loss.is_finite() {
            return Ok(finish(seed, records, RunStatus::Diverged { step }));
        }
    }
    Ok(finish(seed, records, RunStatus::Ok))
}

/// Gradient construction only fails on non-finite state once a run is going.
fn as_nonfinite(e: Error) -> Error {
    match e {
        Error::InvalidInput(m) => Error::NonFinite(m),
        e => e,
    }
}

fn record(step: usize, seed: u64, loss: f64, eval: f64, grad_norm: f64, rho_used: f64, elapsed_ms: f64) -> MetricRecord {
    MetricRecord { step, seed, loss, eval, grad_norm, rho_used, elapsed_ms }
}

fn finish(seed: u64, records: Vec<MetricRecord>, status: RunStatus) -> SeedTrace {
    SeedTrace { seed, records, status }
}
