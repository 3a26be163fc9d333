use flars_core::fcca::{cca_blocks, DesignBlock};
use flars_core::flars::stopping_cd;
use flars_core::funcrep::gauss_legendre_rule;
use flars_core::gpmix::{kernel_matrix, Kernel};
use flars_core::simgen::{replication_seed, selection_metrics};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gauss_legendre_is_symmetric_and_sums_to_two(q in 1usize..=40) {
        let (x, w) = gauss_legendre_rule(q).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|w| *w > 0.0));
        prop_assert!(x.windows(2).all(|p| p[0] < p[1]));
        for i in 0..q {
            prop_assert!((x[i] + x[q - 1 - i]).abs() < 1e-14);
            prop_assert!((w[i] - w[q - 1 - i]).abs() < 1e-14);
        }
    }

    #[test]
    fn selection_percentages_add_up(
        sel in proptest::sample::subsequence(vec!["f1", "f2", "f3", "f4", "z1", "z2"], 0..=6),
    ) {
        let truth: Vec<String> = vec!["f1".into(), "f2".into(), "z1".into()];
        let sel: Vec<String> = sel.into_iter().map(String::from).collect();
        let (t, f, empty) = selection_metrics(&sel, &truth);
        prop_assert_eq!(empty, sel.is_empty());
        if !empty {
            prop_assert!((t + f - 100.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_matrix_is_positive_semidefinite(
        pts in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 2), 2..25),
        v1 in 0.01f64..10.0,
        w0 in 0.01f64..10.0,
        w1 in 0.01f64..10.0,
    ) {
        let a = DMatrix::from_fn(pts.len(), 2, |i, j| pts[i][j]);
        let k = Kernel::new(v1, vec![w0, w1], 0.1).unwrap();
        let m = kernel_matrix(&a, &a, &k, false).unwrap();
        prop_assert!((&m - m.transpose()).amax() < 1e-12);
        prop_assert!(m.diagonal().iter().all(|d| (d - v1).abs() < 1e-12 * v1));
        let eig = m.symmetric_eigen();
        prop_assert!(eig.eigenvalues.min() > -1e-9 * v1 * pts.len() as f64);
    }

    #[test]
    fn canonical_correlation_ignores_affine_maps(
        y in proptest::collection::vec(-5.0f64..5.0, 8..30),
        seed in 0u64..1000,
        a in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0],
        b in -10.0f64..10.0,
        c in 0.1f64..10.0,
    ) {
        let n = y.len();
        let y = DVector::from_vec(y);
        prop_assume!(flars_core::linalg::sd(y.as_slice()) > 1e-3);
        let z = DVector::from_fn(n, |i, _| ((i as u64 * 2654435761 + seed) % 97) as f64 / 97.0 + 0.01 * y[i]);
        prop_assume!(flars_core::linalg::sd(z.as_slice()) > 1e-3);
        let zc = z.add_scalar(-z.mean());
        let rho = |y: &DVector<f64>, z: &DVector<f64>| {
            let blk = DesignBlock::scalar(z);
            cca_blocks(y, &[&blk], &[0.0], 0.0).unwrap().rho
        };
        let r = rho(&y, &zc);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
        let pearson = flars_core::linalg::correlation(y.as_slice(), z.as_slice()).abs();
        prop_assert!((r - pearson).abs() < 1e-10);
        let y2 = y.map(|v| a * v + b);
        prop_assert!((rho(&y2, &(&zc * c)) - r).abs() < 1e-10);
    }

    #[test]
    fn cd_stop_precedes_the_first_small_value(
        cd in proptest::collection::vec(proptest::option::of(0.0f64..1.0), 1..15),
        frac in 0.01f64..0.99,
    ) {
        let k = stopping_cd(&cd, frac);
        prop_assert!(k <= cd.len());
        let max = cd.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if max.is_finite() {
            for v in cd[..k].iter().flatten() {
                prop_assert!(*v >= frac * max);
            }
            if k < cd.len() {
                prop_assert!(cd[k].unwrap() < frac * max);
            }
        }
    }

    #[test]
    fn replication_seeds_are_distinct(master in any::<u64>()) {
        let seeds: std::collections::HashSet<u64> = (0..200).map(|i| replication_seed(master, i)).collect();
        prop_assert_eq!(seeds.len(), 200);
    }
}
