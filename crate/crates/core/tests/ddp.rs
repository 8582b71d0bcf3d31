mod common;

use common::*;
use nalgebra::DMatrix;
use psilora::ddp::{allreduce_diag_stats, allreduce_thin, ddp_psilora_step, shard_batch, DdpSimulator};
use psilora::tasks::{run_seed, ExperimentConfig};
use psilora::{
    kfac_diagonals, psilora_step, Error, GradFactor, KroneckerStats, LoraAdapter, MomentumState, MomentumVariant,
    OptimizerKind, PsiLoraConfig, ScaleConvention, StatsKind,
};

fn gf(seed: u64, b: usize, d_out: usize, d_in: usize) -> GradFactor<f64> {
    let mut g = rng(seed, "ddp/gf");
    GradFactor::new(gauss(&mut g, b, d_in), gauss(&mut g, b, d_out), ScaleConvention::Mean).unwrap()
}

#[test]
fn sharding_examples() {
    let g = gf(1, 8, 5, 4);
    let one = shard_batch(&g, 1).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].grad, g);
    let rows = shard_batch(&g, 8).unwrap();
    assert!(rows.iter().all(|s| s.grad.batch == 1));
    let four = shard_batch(&g, 4).unwrap();
    let mut x = DMatrix::zeros(0, 4);
    let mut s = DMatrix::zeros(0, 5);
    for (i, sh) in four.iter().enumerate() {
        assert_eq!(sh.worker_id, i);
        let n = x.nrows();
        x = x.insert_rows(n, 2, 0.0);
        x.rows_mut(n, 2).copy_from(&sh.grad.x);
        s = s.insert_rows(n, 2, 0.0);
        s.rows_mut(n, 2).copy_from(&sh.grad.s);
    }
    assert_eq!((x, s), (g.x.clone(), g.s.clone()));
    assert!(matches!(shard_batch(&g, 3), Err(Error::InvalidInput(_))));
}

#[test]
fn allreduce_examples() {
    let mut g = rng(2, "ddp/red");
    let a = gauss(&mut g, 6, 2);
    assert_eq!(allreduce_thin(&[a.clone(), a.clone(), a.clone(), a.clone()]).unwrap(), a);
    assert_eq!(allreduce_thin(&[a.clone(), -&a]).unwrap(), DMatrix::zeros(6, 2));
    assert!(allreduce_thin(&[a, gauss(&mut g, 5, 2)]).is_err());
    assert!(allreduce_thin::<f64>(&[]).is_err());
}

#[test]
fn mean_of_local_products_is_global_product() {
    let g = gf(3, 12, 9, 7);
    let v = gauss(&mut rng(3, "ddp/v"), 7, 3);
    for r in [2, 3, 4, 6] {
        let shards = shard_batch(&g, r).unwrap();
        let locals: Vec<_> = shards.iter().map(|s| s.grad.times_in(&v) * r as f64).collect();
        let mean = allreduce_thin(&locals).unwrap();
        assert!((mean - g.dense() * &v).amax() < 1e-12);
    }
}

#[test]
fn reduced_diagonals_equal_global_statistics() {
    let g = gf(4, 12, 5, 6);
    let global = kfac_diagonals(&g.x, &g.s).unwrap();
    let locals: Vec<_> = shard_batch(&g, 4).unwrap().iter().map(|s| kfac_diagonals(&s.grad.x, &s.grad.s).unwrap()).collect();
    let (ds, dx) = allreduce_diag_stats(&locals).unwrap();
    assert!((ds - global.0).amax() < 1e-12);
    assert!((dx - global.1).amax() < 1e-12);
}

#[test]
fn simulated_workers_match_single_worker() {
    for scaled in [false, true] {
        for r in [2, 4] {
            for k in [1, 2, 4] {
                let gap = ddp_gap(r, k, scaled, true, 10);
                assert!(gap < 1e-10, "scaled={scaled} R={r} K={k}: {gap}");
            }
        }
    }
}

#[test]
fn skipping_statistics_sync_drifts() {
    let gap = ddp_gap(4, 2, true, false, 3);
    assert!(gap > 1e-6, "drift {gap}");
}

#[test]
fn workers_stay_identical_and_reduce_only_thin_blocks() {
    let (d_out, d_in, r) = (20, 16, 3);
    let mut g = rng(5, "ddp/thin");
    let adapter = LoraAdapter::new(gauss(&mut g, d_out, r), gauss(&mut g, d_in, r)).unwrap();
    let mom = MomentumState::lorsum(d_out, d_in, r, &mut g).unwrap();
    let stats = KroneckerStats::new(StatsKind::Kfac, 0.99, d_out, d_in).unwrap();
    let cfg = PsiLoraConfig { inner_iters: 2, ..PsiLoraConfig::default() };
    let mut sim = DdpSimulator::new(4, adapter, mom, Some(stats), cfg).unwrap();
    let grad = gf(6, 8, d_out, d_in);
    sim.step(&shard_batch(&grad, 4).unwrap()).unwrap();
    assert_eq!(sim.max_divergence(), 0.0);
    // two projections, K=2 iterations of two half-updates each, plus stats
    let per_iter = d_out * r + d_in * r;
    assert_eq!(sim.last_step_reduced(), 2 * 2 * per_iter + d_out + d_in);
    assert!(sim.last_step_reduced() < d_out * d_in * 2);
}

#[test]
fn one_shot_step_equals_reference() {
    let (d_out, d_in, r) = (12, 10, 2);
    let mut g = rng(8, "ddp/one");
    let adapter = LoraAdapter::new(gauss(&mut g, d_out, r), gauss(&mut g, d_in, r)).unwrap();
    let mom = MomentumState::lorsum(d_out, d_in, r, &mut g).unwrap();
    let cfg = PsiLoraConfig { momentum: 0.3, inner_iters: 3, ..PsiLoraConfig::default() };
    let grad = gf(9, 4, d_out, d_in);
    let (a, m) = psilora_step(&adapter, &grad, &mom, &cfg).unwrap();
    let w = ddp_psilora_step(&shard_batch(&grad, 2).unwrap(), &adapter, &mom, None, &cfg).unwrap();
    assert!((a.u - w.adapter.u).amax() < 1e-12);
    assert!((m.u - w.momentum.u).amax() < 1e-12);
}

#[test]
fn unsupported_setups_are_rejected() {
    let mut g = rng(10, "ddp/rej");
    let adapter = LoraAdapter::new(gauss(&mut g, 6, 2), gauss(&mut g, 5, 2)).unwrap();
    let mom = MomentumState::lorsum(6, 5, 2, &mut g).unwrap();
    let cfg = PsiLoraConfig::<f64>::default();
    let naive = MomentumState::factor_space(MomentumVariant::Naive, &adapter).unwrap();
    assert!(DdpSimulator::new(2, adapter.clone(), naive, None, cfg.clone()).is_err());
    let clip = PsiLoraConfig { clip_max_norm: Some(1.0), ..cfg.clone() };
    assert!(DdpSimulator::new(2, adapter.clone(), mom.clone(), None, clip).is_err());
    let shampoo = KroneckerStats::new(StatsKind::Shampoo, 0.9, 6, 5).unwrap();
    assert!(DdpSimulator::new(2, adapter.clone(), mom.clone(), Some(shampoo), cfg.clone()).is_err());
    let mut sim = DdpSimulator::new(2, adapter, mom, None, cfg).unwrap();
    assert!(sim.step(&shard_batch(&gf(11, 4, 6, 5), 4).unwrap()).is_err());
}

#[test]
fn experiment_runner_with_workers_matches_single_worker() {
    for optimizer in [OptimizerKind::PsiLora, OptimizerKind::ScaledPsiLora] {
        let base = ExperimentConfig {
            optimizer,
            d_out: 60,
            d_in: 32,
            rank: 4,
            batch_size: Some(16),
            steps: 10,
            inner_iters: 2,
            alpha: 0.5,
            ..ExperimentConfig::default()
        };
        let single = run_seed(&base, 0).unwrap();
        let multi = run_seed(&ExperimentConfig { workers: 4, ..base }, 0).unwrap();
        for (a, b) in single.records.iter().zip(&multi.records) {
            assert!((a.loss - b.loss).abs() < 1e-10 * a.loss, "{optimizer}");
        }
    }
}
