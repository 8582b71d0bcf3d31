//! Independent dense oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use psilora::rng::{gaussian_matrix, named_rng, StreamRng};
use psilora::LowRankTerm;

pub type M = DMatrix<f64>;

pub fn rng(seed: u64, label: &str) -> StreamRng {
    named_rng(seed, label)
}

pub fn gauss(rng: &mut StreamRng, rows: usize, cols: usize) -> M {
    gaussian_matrix(rng, rows, cols, 1.0)
}

pub fn term(rng: &mut StreamRng, m: usize, n: usize, r: usize, c: f64) -> LowRankTerm<f64> {
    LowRankTerm::new(c, gauss(rng, m, r), gauss(rng, n, r))
}

/// `Σ cⱼ UⱼVⱼᵀ` by explicit loops.
pub fn dense_sum(terms: &[LowRankTerm<f64>]) -> M {
    let (m, n) = (terms[0].u.nrows(), terms[0].v.nrows());
    let mut w = M::zeros(m, n);
    for t in terms {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..t.u.ncols() {
                    acc += t.u[(i, k)] * t.v[(j, k)];
                }
                w[(i, j)] += t.coeff * acc;
            }
        }
    }
    w
}

/// Singular values, descending, straight from nalgebra.
pub fn singular_values(w: &M) -> Vec<f64> {
    let mut s: Vec<f64> = SVD::new(w.clone(), false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

/// `Σ_{i>r} σᵢ²`.
pub fn tail_energy(w: &M, r: usize) -> f64 {
    singular_values(w).iter().skip(r).map(|s| s * s).sum()
}

/// Best rank-r approximation via an eigendecomposition of `WᵀW`
/// (independent of the SVD path under test).
pub fn eig_projection(w: &M, r: usize) -> M {
    let eig = SymmetricEigen::new(w.transpose() * w);
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let basis = DMatrix::from_fn(w.ncols(), r, |i, j| eig.eigenvectors[(i, idx[j])]);
    w * &basis * basis.transpose()
}

pub fn random_rank(rng: &mut StreamRng, m: usize, n: usize, r: usize) -> M {
    gauss(rng, m, r) * gauss(rng, r, n)
}

/// Symmetric PSD power `A^p` on the support of `A` (pseudo-inverse for p < 0).
pub fn psd_power(a: &M, p: f64) -> M {
    let eig = SymmetricEigen::new(a.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let cut = 1e-10 * top.max(f64::MIN_POSITIVE);
    let d = DVector::from_fn(eig.eigenvalues.len(), |i, _| {
        let l = eig.eigenvalues[i];
        if l > cut { l.powf(p) } else { 0.0 }
    });
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Pseudo-inverse of `(AᵀA)^{1/2}` built as `V Σ⁺ Vᵀ` from a faer SVD of `a`,
/// which avoids squaring the condition number.
pub fn gram_inv_sqrt(a: &M) -> M {
    let f = faer::Mat::<f64>::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)]);
    let svd = f.thin_svd().expect("svd");
    let (s, v) = (svd.S(), svd.V());
    let k = a.nrows().min(a.ncols());
    let top = (0..k).fold(0.0f64, |m, i| m.max(s[i]));
    let mut out = M::zeros(a.ncols(), a.ncols());
    for i in (0..k).filter(|&i| s[i] > 1e-10 * top) {
        let col = DVector::from_fn(a.ncols(), |j, _| v[(j, i)]);
        out += &col * col.transpose() / s[i];
    }
    out
}

/// Orthogonal projector onto the column space of `x` via eigenvectors of `XXᵀ`.
pub fn eig_projector(x: &M) -> M {
    let g = x * x.transpose();
    let eig = SymmetricEigen::new(g);
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, &x| m.max(x));
    let mut p = M::zeros(x.nrows(), x.nrows());
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l > 1e-10 * top {
            let v = eig.eigenvectors.column(i);
            p += v * v.transpose();
        }
    }
    p
}

pub fn rank_of(x: &M) -> usize {
    let s = singular_values(x);
    let top = s.first().copied().unwrap_or(0.0);
    s.iter().filter(|&&v| v > 1e-10 * top).count()
}

pub fn max_abs(m: &M) -> f64 {
    m.amax()
}

/// `‖W‖²_UV` by explicit loops.
pub fn metric_norm_sq(w: &M, d_u: &DVector<f64>, d_v: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            acc += d_u[i] * w[(i, j)] * w[(i, j)] * d_v[j];
        }
    }
    acc
}

pub fn positive_vec(rng: &mut StreamRng, n: usize) -> DVector<f64> {
    let g = gauss(rng, n, 1);
    DVector::from_fn(n, |i, _| 0.2 + g[(i, 0)].abs() * 2.0)
}

/// `W̄ = U₀V₀ᵀ − η SᵀX` with Gaussian factors and a full-rank `G`.
pub fn step_instance(seed: u64, m: usize, n: usize, r: usize, eta: f64) -> psilora::LowRankSum<f64> {
    let mut g = rng(seed, "instance");
    let anchor = LowRankTerm::new(1.0, gauss(&mut g, m, r), gauss(&mut g, n, r));
    let b = m.min(n);
    let grad = LowRankTerm::new(-eta, gauss(&mut g, m, b), gauss(&mut g, n, b));
    psilora::LowRankSum::new(vec![anchor, grad]).unwrap()
}

/// `A⁻¹` of a small well-conditioned matrix.
pub fn inv(a: &M) -> M {
    a.clone().try_inverse().expect("invertible")
}

/// `(‖D_U⁺ SᵀX D_V⁺‖², tr(𝒫_S 𝒫_X))` with `D_U = (SᵀS)^{1/2}`,
/// `D_V = (XᵀX)^{1/2}` formed densely; projectors act on the batch space.
pub fn sqrt_kfac_pair(s: &M, x: &M) -> (f64, f64) {
    let du = gram_inv_sqrt(s);
    let dv = gram_inv_sqrt(x);
    let lhs = (du * s.transpose() * x * dv).norm_squared();
    let rhs = (eig_projector(s) * eig_projector(x)).trace();
    (lhs, rhs)
}

/// U-factor after one scaled step from `(cX, S)` at `ρ` and from `(X, S)`
/// at `ρ/c`, with `γ = 1/2`, `δ = 0`, `β₁ = β₂ = 0`, split `a = 1`.
pub fn clipped_vs_rescaled(seed: u64, c: f64) -> (M, M) {
    use psilora::{
        scaled_psilora_step, GradFactor, KroneckerStats, LoraAdapter, MomentumState, PsiLoraConfig,
        ScaleConvention, StatsKind,
    };
    let (d_out, d_in, r, b) = (10, 7, 3, 6);
    let mut g = rng(seed, "clip");
    let adapter = LoraAdapter::new(gauss(&mut g, d_out, r), gauss(&mut g, d_in, r)).unwrap();
    let gf = GradFactor::new(gauss(&mut g, b, d_in), gauss(&mut g, b, d_out), ScaleConvention::Mean).unwrap();
    let momentum = MomentumState::lorsum(d_out, d_in, r, &mut g).unwrap();
    let stats = KroneckerStats::new(StatsKind::Kfac, 0.0, d_out, d_in).unwrap();
    let rho = 0.3;
    let base = PsiLoraConfig {
        eta: 0.5,
        momentum: 0.0,
        beta2: 0.0,
        gamma: 0.5,
        delta: 0.0,
        inner_iters: 1,
        clip_split_a: 1.0,
        ..PsiLoraConfig::default()
    };
    let clipped_cfg = PsiLoraConfig { rho: Some(rho), clip_max_norm: Some(c * gf.norm()), ..base.clone() };
    let plain_cfg = PsiLoraConfig { rho: Some(rho / c), clip_max_norm: None, ..base };
    let (a1, _, _) = scaled_psilora_step(&adapter, &gf, &momentum, &stats, &clipped_cfg).unwrap();
    let (a2, _, _) = scaled_psilora_step(&adapter, &gf, &momentum, &stats, &plain_cfg).unwrap();
    (a1.u, a2.u)
}

/// Max-abs gap between each layer's `SᵀX` and central differences of the
/// loss over the effective weight entries.
pub fn mlp_fd_gap(spec: &psilora::tasks::MlpTaskSpec, batch: usize, h: f64) -> f64 {
    use psilora::tasks::{gen_mlp_task, mlp_forward_backward};
    let (data, model) = gen_mlp_task::<f64>(spec).unwrap();
    let x = data.x_train.rows(0, batch).into_owned();
    let y = &data.y_train[..batch];
    let grads = mlp_forward_backward(&model, &x, y).unwrap();
    let mut worst: f64 = 0.0;
    for (l, gf) in grads.factors.iter().enumerate() {
        let analytic = gf.dense();
        let base = model.layers[l].base_frozen.clone().expect("task layers carry a base");
        for i in 0..base.nrows() {
            for j in 0..base.ncols() {
                let mut plus = model.clone();
                let mut minus = model.clone();
                plus.layers[l].base_frozen.as_mut().unwrap()[(i, j)] += h;
                minus.layers[l].base_frozen.as_mut().unwrap()[(i, j)] -= h;
                let fd = (plus.loss(&x, y) - minus.loss(&x, y)) / (2.0 * h);
                worst = worst.max((fd - analytic[(i, j)]).abs());
            }
        }
    }
    worst
}

/// Largest Frobenius gap between single-worker steps on the whole column
/// batch and `r` simulated workers, over `steps` closed-loop steps of the
/// small linear task. Compares both the adapter and the momentum buffer.
pub fn ddp_gap(r: usize, k: usize, scaled: bool, sync_stats: bool, steps: usize) -> f64 {
    use psilora::ddp::{shard_batch, DdpSimulator};
    use psilora::tasks::{gen_linear_task, linear_grad_factors, sample_columns, BatchSelection, LinearTaskSpec};
    use psilora::{psilora_step, scaled_psilora_step, KroneckerStats, MomentumState, PsiLoraConfig, StatsKind};

    let spec = LinearTaskSpec { d_out: 48, d_in: 40, rank: 4, seed: 7, ..LinearTaskSpec::default() };
    let (w, adapter0) = gen_linear_task::<f64>(&spec).unwrap();
    let mom0 = MomentumState::lorsum(48, 40, 4, &mut rng(7, "ddp/mom")).unwrap();
    let stats0 = scaled.then(|| KroneckerStats::new(StatsKind::Kfac, 0.9, 48, 40).unwrap());
    let cfg = PsiLoraConfig {
        eta: 0.3,
        momentum: if scaled { 0.9 } else { 0.5 },
        inner_iters: k,
        ..PsiLoraConfig::default()
    };
    let mut sim = DdpSimulator::new(r, adapter0.clone(), mom0.clone(), stats0.clone(), cfg.clone())
        .unwrap()
        .with_stats_sync(sync_stats);
    let (mut a, mut m, mut st) = (adapter0, mom0, stats0);
    let mut cols_rng = rng(7, "ddp/cols");
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let sel = BatchSelection::Columns(sample_columns(&mut cols_rng, 40, 16));
        let gf = linear_grad_factors(&a, &w, &sel).unwrap();
        match st.as_mut() {
            Some(s) => {
                let (a2, m2, s2) = scaled_psilora_step(&a, &gf, &m, s, &cfg).unwrap();
                (a, m, *s) = (a2, m2, s2);
            }
            None => (a, m) = psilora_step(&a, &gf, &m, &cfg).unwrap(),
        }
        let local = linear_grad_factors(&sim.workers[0].adapter, &w, &sel).unwrap();
        sim.step(&shard_batch(&local, r).unwrap()).unwrap();
        let wk = &sim.workers[0];
        worst = worst.max((a.delta() - wk.adapter.delta()).norm());
        worst = worst.max((&m.u * m.v.transpose() - &wk.momentum.u * wk.momentum.v.transpose()).norm());
    }
    worst
}

/// One optimizer of each kind at the given shape, stepped once, with the
/// state it then holds.
pub fn measured_states(dims: psilora::LayerDims) -> Vec<(psilora::OptimizerKind, usize)> {
    use psilora::optimizer::{LoraAdam, LoraSgd, PsiLora, RpLora, ScaledPsiLora, SvdLora};
    use psilora::{AdapterOptimizer, GradFactor, KroneckerStats, LoraAdapter, MomentumState, PsiLoraConfig, ScaleConvention, StatsKind};
    let mut g = rng(14, "o/state");
    let a = LoraAdapter::lora_init(dims.d_out, dims.d_in, dims.r, &mut g).unwrap();
    let gf = GradFactor::new(gauss(&mut g, 4, dims.d_in), gauss(&mut g, 4, dims.d_out), ScaleConvention::Mean).unwrap();
    let cfg = PsiLoraConfig::default();
    let mut opts: Vec<Box<dyn AdapterOptimizer<f64>>> = vec![
        Box::new(LoraSgd::new(&a, 0.1, 0.9)),
        Box::new(LoraAdam::new(&a, 0.1, 0.9, 0.999)),
        Box::new(RpLora::new(&a, 0.1, 0.9, 1e-6)),
        Box::new(SvdLora::new(&a, 0.1, 0.9)),
        Box::new(PsiLora { config: cfg.clone(), momentum: MomentumState::lorsum(dims.d_out, dims.d_in, dims.r_m, &mut g).unwrap() }),
        Box::new(ScaledPsiLora {
            config: cfg,
            momentum: MomentumState::lorsum(dims.d_out, dims.d_in, dims.r_m, &mut g).unwrap(),
            stats: KroneckerStats::new(StatsKind::Kfac, 0.99, dims.d_out, dims.d_in).unwrap(),
        }),
    ];
    opts.iter_mut()
        .map(|o| {
            let mut a = a.clone();
            o.step(&mut a, &gf).unwrap();
            (o.kind(), o.state_len())
        })
        .collect()
}
