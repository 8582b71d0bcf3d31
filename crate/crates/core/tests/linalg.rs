mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use psilora::linalg::SolvePath;
use psilora::{balanced_factors, column_projector, spd_solve, spd_solve_detailed, truncated_svd, Error, SvdTriple};

#[test]
fn spd_identity_returns_rhs() {
    let b = gauss(&mut rng(1, "t/b"), 3, 2);
    let x = spd_solve(&DMatrix::identity(3, 3), &b).unwrap();
    assert!((x - b).amax() < 1e-15);
}

#[test]
fn spd_random_well_conditioned() {
    let mut g = rng(2, "t/spd");
    let m = gauss(&mut g, 8, 8);
    let a = m.transpose() * &m + DMatrix::identity(8, 8);
    let b = gauss(&mut g, 8, 3);
    let x = spd_solve(&a, &b).unwrap();
    assert!((&a * x - b).norm() < 1e-9);
}

#[test]
fn spd_near_singular_takes_fallback() {
    let mut g = rng(3, "t/near");
    let q = gauss(&mut g, 6, 6).qr().q();
    let mut eig = DVector::from_element(6, 1.0);
    eig[5] = 1e-14;
    let a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    let a = (&a + a.transpose()) * 0.5;
    // consistent right-hand side: B in the range of A
    let b = &a * gauss(&mut g, 6, 2);
    let sol = spd_solve_detailed(&a, &b).unwrap();
    assert_ne!(sol.path, SolvePath::Cholesky);
    assert!((&a * &sol.x - &b).norm() < 1e-6);
}

#[test]
fn spd_rejects_bad_input() {
    let mut a = DMatrix::<f64>::identity(2, 2);
    a[(0, 1)] = f64::NAN;
    assert!(matches!(spd_solve(&a, &DMatrix::zeros(2, 1)), Err(Error::InvalidInput(_))));
    let z = DMatrix::<f64>::zeros(2, 2);
    assert!(matches!(spd_solve(&z, &DMatrix::from_element(2, 1, 1.0)), Err(Error::SingularSystem(_))));
}

#[test]
fn spd_residual_bound_on_many_systems() {
    let mut g = rng(4, "t/many");
    for i in 0..1000 {
        let r = 1 + i % 64;
        let m = gauss(&mut g, r, r);
        let a = m.transpose() * &m + DMatrix::identity(r, r) * 1e-3;
        let a = (&a + a.transpose()) * 0.5;
        let b = gauss(&mut g, r, 2);
        let x = spd_solve(&a, &b).unwrap();
        assert!((&a * x - &b).norm() <= 1e-9 * (1.0 + b.norm()), "system {i} (r={r})");
    }
}

#[test]
fn truncated_svd_examples() {
    let w = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0f64, 2.0, 1.0]));
    let t = truncated_svd(&w, 2).unwrap();
    assert_eq!(t.singular.len(), 2);
    assert!((t.singular[0] - 3.0).abs() < 1e-14 && (t.singular[1] - 2.0).abs() < 1e-14);
    let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 0.0]));
    assert!((t.reconstruct() - expect).amax() < 1e-14);

    let mut g = rng(5, "t/svd");
    let (u, v) = (gauss(&mut g, 7, 1), gauss(&mut g, 5, 1));
    let outer = &u * v.transpose();
    assert!((truncated_svd(&outer, 1).unwrap().reconstruct() - &outer).norm() < 1e-12);

    let big = gauss(&mut g, 600, 200);
    let t = truncated_svd(&big, 8).unwrap();
    let err = (&big - t.reconstruct()).norm_squared();
    let tail = tail_energy(&big, 8);
    assert!(((err - tail) / tail).abs() < 1e-10);

    assert!(truncated_svd(&big, 201).is_err());
    let mut bad = big.clone();
    bad[(0, 0)] = f64::INFINITY;
    assert!(matches!(truncated_svd(&bad, 2), Err(Error::InvalidInput(_))));
}

#[test]
fn truncated_svd_triple_is_orthonormal_and_sorted() {
    let w = gauss(&mut rng(6, "t/orth"), 30, 20);
    let t = truncated_svd(&w, 7).unwrap();
    assert!((t.left.transpose() * &t.left - DMatrix::identity(7, 7)).amax() < 1e-10);
    assert!((t.right.transpose() * &t.right - DMatrix::identity(7, 7)).amax() < 1e-10);
    assert!(t.singular.as_slice().windows(2).all(|p| p[0] >= p[1]));
    assert!(t.singular.iter().all(|&s| s >= 0.0));
}

#[test]
fn balanced_factor_examples() {
    let t = SvdTriple {
        left: DMatrix::identity(3, 2),
        singular: DVector::from_vec(vec![4.0f64, 1.0]),
        right: DMatrix::identity(2, 2),
    };
    let (u, _) = balanced_factors(&t);
    assert!((u.column(0).norm() - 2.0).abs() < 1e-15 && (u.column(1).norm() - 1.0).abs() < 1e-15);

    let t = SvdTriple {
        left: DMatrix::from_element(1, 1, 1.0),
        singular: DVector::from_element(1, 9.0f64),
        right: DMatrix::from_element(1, 1, 1.0),
    };
    let (u, v) = balanced_factors(&t);
    assert!((u.norm() - 3.0).abs() < 1e-15 && (v.norm() - 3.0).abs() < 1e-15);

    let t = truncated_svd(&gauss(&mut rng(7, "t/bal"), 12, 9), 4).unwrap();
    let (u, v) = balanced_factors(&t);
    assert!((&u * v.transpose() - t.reconstruct()).norm() < 1e-12);
    let energy: f64 = t.singular.iter().sum();
    assert!((u.norm_squared() - energy).abs() <= 1e-10 * energy);
    assert!((v.norm_squared() - energy).abs() <= 1e-10 * energy);
}

#[test]
fn projector_examples() {
    let e1 = DMatrix::from_column_slice(4, 1, &[1.0f64, 0.0, 0.0, 0.0]);
    let p = column_projector(&e1).unwrap();
    assert!((p - &e1 * e1.transpose()).amax() < 1e-15);

    let sq = gauss(&mut rng(8, "t/sq"), 5, 5);
    assert!((column_projector(&sq).unwrap() - DMatrix::identity(5, 5)).amax() < 1e-10);

    let x = gauss(&mut rng(9, "t/dup"), 6, 1);
    let dup = DMatrix::from_fn(6, 2, |i, _| x[(i, 0)]);
    assert!((column_projector(&dup).unwrap() - column_projector(&x).unwrap()).amax() < 1e-12);
}

#[test]
fn projector_is_idempotent_symmetric_and_fixes_x() {
    let mut g = rng(10, "t/proj");
    for k in [1, 3, 6] {
        let x = gauss(&mut g, 9, k);
        let p = column_projector(&x).unwrap();
        assert!((&p * &p - &p).amax() < 1e-9);
        assert!((&p - p.transpose()).amax() < 1e-9);
        assert!((&p * &x - &x).amax() < 1e-9);
        assert!((&p - eig_projector(&x)).amax() < 1e-9);
    }
}

#[test]
fn eckart_young_against_random_competitors() {
    let mut g = rng(11, "t/ey");
    for i in 0..200 {
        let m = 2 + (i * 7) % 63;
        let n = 2 + (i * 13) % 63;
        let r = 1 + i % m.min(n);
        let w = gauss(&mut g, m, n);
        let best = (&w - truncated_svd(&w, r).unwrap().reconstruct()).norm();
        for _ in 0..100 {
            let cand = random_rank(&mut g, m, n, r) * (w.norm() / (m * n) as f64).sqrt();
            assert!(best <= (&w - cand).norm() + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncation_error_is_tail_energy(seed in 0u64..10_000, m in 2usize..40, n in 2usize..40, r in 1usize..8) {
        let r = r.min(m.min(n));
        let w = gauss(&mut rng(seed, "p/tail"), m, n);
        let err = (&w - truncated_svd(&w, r).unwrap().reconstruct()).norm_squared();
        let tail = tail_energy(&w, r);
        prop_assert!((err - tail).abs() <= 1e-10 * tail + 1e-24 * w.norm_squared());
        prop_assert!((truncated_svd(&w, r).unwrap().reconstruct() - eig_projection(&w, r)).norm() < 1e-6 * w.norm());
    }

    #[test]
    fn balanced_norms_match(seed in 0u64..10_000, m in 1usize..30, n in 1usize..30, r in 1usize..6) {
        let r = r.min(m.min(n));
        let t = truncated_svd(&gauss(&mut rng(seed, "p/bal"), m, n), r).unwrap();
        let (u, v) = balanced_factors(&t);
        let energy: f64 = t.singular.iter().sum();
        prop_assert!((u.norm_squared() - energy).abs() <= 1e-10 * energy.max(1.0));
        prop_assert!((v.norm_squared() - energy).abs() <= 1e-10 * energy.max(1.0));
    }
}
