//! Sequential simulation of data-parallel PSI-LoRA.
//!
//! Each worker holds a row shard of the global batch and a full copy of the
//! optimizer state. Inside every ALS half-update the workers form their local
//! thin products `Sᵣᵀ(Xᵣ V)` and average them with [`allreduce_thin`]; the
//! diagonal statistics are averaged with [`allreduce_diag_stats`]. Reduction
//! order is fixed by worker id, so the result is deterministic.
//!
//! Local gradient terms carry the coefficient `c·R` so that the mean over
//! `R` workers reproduces the global sum; the division by `R` is exact when
//! `R` is a power of two.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::florsum::{metric_factors, KroneckerStats, MetricPair, StatsKind};
use crate::linalg::all_finite;
use crate::lorsum::{HalfProblem, LowRankTerm, Regularizer, UpdateOrder};
use crate::optimizer::{
    resolve_rho, AdapterOptimizer, GradFactor, LoraAdapter, MomentumState, MomentumVariant, OptimizerKind, PsiLoraConfig,
    StepReport,
};
use crate::scalar::{cast, Scalar};

/// One worker's slice of the global batch.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerShard<T: Scalar> {
    pub worker_id: usize,
    pub grad: GradFactor<T>,
}

/// Splits the batch rows into `r` contiguous, equally sized shards.
pub fn shard_batch<T: Scalar>(gf: &GradFactor<T>, r: usize) -> Result<Vec<WorkerShard<T>>> {
    if r == 0 {
        return invalid("worker count must be at least 1");
    }
    if !gf.batch.is_multiple_of(r) {
        return invalid(format!("batch of {} rows does not split over {r} workers", gf.batch));
    }
    let len = gf.batch / r;
    (0..r)
        .map(|w| Ok(WorkerShard { worker_id: w, grad: gf.rows(w * len, len)? }))
        .collect()
}

/// Elementwise mean, summed in slice order.
pub fn allreduce_thin<T: Scalar>(locals: &[DMatrix<T>]) -> Result<DMatrix<T>> {
    let first = locals.first().ok_or_else(|| Error::InvalidInput("nothing to reduce".into()))?;
    let mut acc = DMatrix::zeros(first.nrows(), first.ncols());
    for (i, m) in locals.iter().enumerate() {
        if m.shape() != first.shape() {
            return invalid(format!("worker {i} sent a {:?} block, expected {:?}", m.shape(), first.shape()));
        }
        acc += m;
    }
    let inv: T = T::one() / cast::<T>(locals.len() as f64);
    Ok(acc * inv)
}

/// Mean of per-worker `(diag_s, diag_x)` pairs.
///
/// Each worker normalizes by its own shard size; with equal shards the mean
/// equals the global `diag(·)/B`.
pub fn allreduce_diag_stats<T: Scalar>(locals: &[(DVector<T>, DVector<T>)]) -> Result<(DVector<T>, DVector<T>)> {
    let s: Vec<DMatrix<T>> = locals.iter().map(|(s, _)| DMatrix::from_column_slice(s.len(), 1, s.as_slice())).collect();
    let x: Vec<DMatrix<T>> = locals.iter().map(|(_, x)| DMatrix::from_column_slice(x.len(), 1, x.as_slice())).collect();
    let s = allreduce_thin(&s)?;
    let x = allreduce_thin(&x)?;
    Ok((s.column(0).into_owned(), x.column(0).into_owned()))
}

/// Optimizer state replicated on one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerState<T: Scalar> {
    pub adapter: LoraAdapter<T>,
    pub momentum: MomentumState<T>,
    pub stats: Option<KroneckerStats<T>>,
}

/// Lockstep simulator of `R` workers running (Scaled) PSI-LoRA.
#[derive(Debug, Clone)]
pub struct DdpSimulator<T: Scalar> {
    pub workers: Vec<WorkerState<T>>,
    pub config: PsiLoraConfig<T>,
    /// When false each worker keeps its own statistics (negative control).
    pub sync_stats: bool,
    last_reduced: usize,
    total_reduced: usize,
}

impl<T: Scalar> DdpSimulator<T> {
    /// `stats = Some(..)` selects the scaled step.
    pub fn new(
        n_workers: usize,
        adapter: LoraAdapter<T>,
        momentum: MomentumState<T>,
        stats: Option<KroneckerStats<T>>,
        config: PsiLoraConfig<T>,
    ) -> Result<Self> {
        config.validate()?;
        if n_workers == 0 {
            return invalid("worker count must be at least 1");
        }
        if momentum.variant != MomentumVariant::Lorsum {
            return invalid("the data-parallel step supports LorSum momentum only");
        }
        if config.clip_max_norm.is_some() {
            return invalid("clipping needs the global gradient norm; not supported data-parallel");
        }
        if let Some(s) = &stats {
            if s.kind == StatsKind::Shampoo {
                return invalid("Shampoo statistics couple rows across shards; not supported data-parallel");
            }
        }
        let w = WorkerState { adapter, momentum, stats };
        Ok(Self {
            workers: vec![w; n_workers],
            config,
            sync_stats: true,
            last_reduced: 0,
            total_reduced: 0,
        })
    }

    pub fn with_stats_sync(mut self, sync: bool) -> Self {
        self.sync_stats = sync;
        self
    }

    pub fn n_workers(&self) -> usize {
        self.workers.len()
    }

    /// Elements all-reduced during the last step.
    pub fn last_step_reduced(&self) -> usize {
        self.last_reduced
    }

    pub fn total_reduced(&self) -> usize {
        self.total_reduced
    }

    /// Largest Frobenius distance of any worker's `UVᵀ` to worker 0's.
    pub fn max_divergence(&self) -> T {
        let reference = self.workers[0].adapter.delta();
        self.workers
            .iter()
            .map(|w| (w.adapter.delta() - &reference).norm())
            .fold(T::zero(), |a, b| a.max(b))
    }

    /// One synchronized step over the given shards.
    pub fn step(&mut self, shards: &[WorkerShard<T>]) -> Result<()> {
        let r = self.workers.len();
        if shards.len() != r {
            return invalid(format!("{} shards for {r} workers", shards.len()));
        }
        let rows = shards[0].grad.batch;
        for (i, s) in shards.iter().enumerate() {
            if s.worker_id != i || s.grad.batch != rows {
                return invalid("shards must be equal-sized and ordered by worker id");
            }
            self.workers[i].adapter.check_grad(s.grad.d_out(), s.grad.d_in())?;
        }
        let mut reduced = 0usize;
        let eta = self.config.eta;
        let beta = self.config.momentum;
        let als = self.config.als(eta);
        let rho = match als.regularizer {
            Regularizer::Proximal(p) | Regularizer::Ridge(p) => p,
        };
        let scaled = self.workers[0].stats.is_some();
        let big_r: T = cast(r as f64);

        // statistics
        let mut metrics: Vec<Option<MetricPair<T>>> = vec![None; r];
        let mut new_stats: Vec<Option<KroneckerStats<T>>> = self.workers.iter().map(|w| w.stats.clone()).collect();
        if scaled {
            let locals = shards
                .iter()
                .zip(&self.workers)
                .map(|(s, w)| w.stats.as_ref().expect("scaled workers hold stats").batch_diagonals(&s.grad.x, &s.grad.s))
                .collect::<Result<Vec<_>>>()?;
            let global = if self.sync_stats {
                reduced += locals[0].0.len() + locals[0].1.len();
                Some(allreduce_diag_stats(&locals)?)
            } else {
                None
            };
            for (i, st) in new_stats.iter_mut().enumerate() {
                let st = st.as_mut().expect("scaled workers hold stats");
                let (ds, dx) = global.as_ref().unwrap_or(&locals[i]);
                st.absorb(ds, dx)?;
                metrics[i] = Some(metric_factors(st, self.config.delta, self.config.gamma)?);
            }
        }

        // weight projection
        let (grad_c, mom_c) = if scaled {
            (-eta * (T::one() - beta), -eta * beta)
        } else {
            (-eta, -eta * beta)
        };
        let anchors: Vec<LowRankTerm<T>> = self
            .workers
            .iter()
            .map(|w| LowRankTerm::new(T::one(), w.adapter.u.clone(), w.adapter.v.clone()))
            .collect();
        let extras: Vec<LowRankTerm<T>> = self
            .workers
            .iter()
            .map(|w| w.momentum.weight_term(&w.adapter, mom_c))
            .collect();
        let local_grads: Vec<LowRankTerm<T>> = shards.iter().map(|s| s.grad.term(grad_c * big_r)).collect();
        let weights = lockstep_als(
            &anchors,
            &local_grads,
            Some(&extras),
            &metrics,
            rho,
            als.inner_iters,
            als.order,
            &mut reduced,
        )?;

        // momentum projection, Euclidean
        let (decay, weight) = if scaled { (beta, T::one() - beta) } else { (beta, T::one()) };
        let m_anchors: Vec<LowRankTerm<T>> = self
            .workers
            .iter()
            .map(|w| LowRankTerm::new(decay, w.momentum.u.clone(), w.momentum.v.clone()))
            .collect();
        let m_grads: Vec<LowRankTerm<T>> = shards.iter().map(|s| s.grad.term(weight * big_r)).collect();
        let none = vec![None; r];
        let moms = lockstep_als(&m_anchors, &m_grads, None, &none, rho, als.inner_iters, als.order, &mut reduced)?;

        for ((u, v), (mu, mv)) in weights.iter().zip(&moms) {
            for (m, what) in [(u, "adapter U"), (v, "adapter V"), (mu, "momentum U"), (mv, "momentum V")] {
                if !all_finite(m) {
                    return Err(Error::NonFinite(format!("{what} after data-parallel step")));
                }
            }
        }
        for (i, ((u, v), (mu, mv))) in weights.into_iter().zip(moms).enumerate() {
            let w = &mut self.workers[i];
            w.adapter.u = u;
            w.adapter.v = v;
            w.momentum.u = mu;
            w.momentum.v = mv;
            w.stats = new_stats[i].take();
        }
        self.last_reduced = reduced;
        self.total_reduced += reduced;
        Ok(())
    }
}

/// Gauss-Seidel proximal ALS run by all workers at once. Worker `i` owns
/// `anchors[i]` (plus `extras[i]`, a local step term) and the shard term
/// `grads[i]`; only the shard products are all-reduced.
#[allow(clippy::too_many_arguments)]
fn lockstep_als<T: Scalar>(
    anchors: &[LowRankTerm<T>],
    grads: &[LowRankTerm<T>],
    extras: Option<&[LowRankTerm<T>]>,
    metrics: &[Option<MetricPair<T>>],
    rho: T,
    iters: usize,
    order: UpdateOrder,
    reduced: &mut usize,
) -> Result<Vec<(DMatrix<T>, DMatrix<T>)>> {
    let anchors: Vec<LowRankTerm<T>> = anchors.iter().map(LowRankTerm::folded).collect();
    let r = anchors.len();
    let mut us: Vec<DMatrix<T>> = anchors.iter().map(|a| a.u.clone()).collect();
    let mut vs: Vec<DMatrix<T>> = anchors.iter().map(|a| a.v.clone()).collect();

    let half = |out: bool, others: &[DMatrix<T>], reduced: &mut usize| -> Result<Vec<DMatrix<T>>> {
        let locals: Vec<DMatrix<T>> = (0..r)
            .map(|i| if out { grads[i].apply(&others[i]) } else { grads[i].apply_transpose(&others[i]) })
            .collect();
        let mean = crate::ddp::allreduce_thin(&locals)?;
        *reduced += mean.len();
        (0..r)
            .map(|i| {
                let a = &anchors[i];
                let m = metrics[i].as_ref();
                let mut delta = DMatrix::zeros(mean.nrows(), mean.ncols());
                delta += &mean;
                if let Some(ex) = extras {
                    delta += if out { ex[i].apply(&others[i]) } else { ex[i].apply_transpose(&others[i]) };
                }
                let p = if out {
                    HalfProblem {
                        anchor_out: &a.u,
                        anchor_in: &a.v,
                        metric_out: m.map(|p| &p.d_u),
                        metric_in: m.map(|p| &p.d_v),
                        shift: rho,
                        anchor_weight: rho,
                    }
                } else {
                    HalfProblem {
                        anchor_out: &a.v,
                        anchor_in: &a.u,
                        metric_out: m.map(|p| &p.d_v),
                        metric_in: m.map(|p| &p.d_u),
                        shift: rho,
                        anchor_weight: rho,
                    }
                };
                p.solve(&others[i], &delta)
            })
            .collect()
    };

    for _ in 0..iters {
        match order {
            UpdateOrder::UFirst => {
                us = half(true, &vs, reduced)?;
                vs = half(false, &us, reduced)?;
            }
            UpdateOrder::VFirst => {
                vs = half(false, &us, reduced)?;
                us = half(true, &vs, reduced)?;
            }
        }
    }
    Ok(us.into_iter().zip(vs).collect())
}

/// One synchronized step on `r` workers starting from shared state.
/// Returns worker 0's resulting state.
pub fn ddp_psilora_step<T: Scalar>(
    shards: &[WorkerShard<T>],
    adapter: &LoraAdapter<T>,
    momentum: &MomentumState<T>,
    stats: Option<&KroneckerStats<T>>,
    config: &PsiLoraConfig<T>,
) -> Result<WorkerState<T>> {
    let mut sim = DdpSimulator::new(shards.len(), adapter.clone(), momentum.clone(), stats.cloned(), config.clone())?;
    sim.step(shards)?;
    Ok(sim.workers.swap_remove(0))
}

impl<T: Scalar> AdapterOptimizer<T> for DdpSimulator<T> {
    /// Shards `gf` over the workers, steps them, and copies worker 0's
    /// adapter out.
    fn step(&mut self, adapter: &mut LoraAdapter<T>, gf: &GradFactor<T>) -> Result<StepReport<T>> {
        let shards = shard_batch(gf, self.n_workers())?;
        DdpSimulator::step(self, &shards)?;
        *adapter = self.workers[0].adapter.clone();
        Ok(StepReport { rho: Some(resolve_rho(&self.config, self.config.eta)) })
    }

    fn state_len(&self) -> usize {
        let w = &self.workers[0];
        w.momentum.state_len() + w.stats.as_ref().map_or(0, KroneckerStats::state_len)
    }

    fn kind(&self) -> OptimizerKind {
        if self.workers[0].stats.is_some() {
            OptimizerKind::ScaledPsiLora
        } else {
            OptimizerKind::PsiLora
        }
    }
}
