use lsh_core::checkpoint::{from_bytes, to_bytes};
use lsh_core::linalg::{qr_decompose, symmetric_eigen, Matrix};
use lsh_core::ls_space::{distance, DistanceMetric};
use lsh_core::lyapunov::spectrum_stats;
use lsh_core::search::{generate_count, keep_count, pool_trajectory};
use lsh_core::sparsity::{apply_death, cosine_decay, grow, redistribute, sparse_init, DeathMode, InitMode, RedistMode};
use lsh_core::training::{ArchKind, ModelSpec, SparseModel};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn square_matrix() -> impl Strategy<Value = Matrix> {
    (1usize..9).prop_flat_map(|n| matrix(n, n))
}

fn shapes() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((1usize..12, 1usize..12), 1..5)
}

fn death_mode() -> impl Strategy<Value = DeathMode> {
    prop::sample::select(DeathMode::ALL.to_vec())
}

fn redist_mode() -> impl Strategy<Value = RedistMode> {
    prop::sample::select(RedistMode::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn qr_reconstructs_with_orthonormal_q(a in square_matrix()) {
        let (q, r) = qr_decompose(&a).unwrap();
        let qtq = q.transpose().matmul(&q).unwrap();
        prop_assert!(qtq.max_abs_diff(&Matrix::identity(q.cols())).unwrap() < 1e-10);
        prop_assert!(q.matmul(&r).unwrap().max_abs_diff(&a).unwrap() < 1e-9);
        for i in 0..r.rows() {
            prop_assert!(r.row(i)[i] >= 0.0);
            for j in 0..i {
                prop_assert_eq!(r.row(i)[j], 0.0);
            }
        }
    }

    #[test]
    fn symmetric_eigen_matches_trace_and_residual(b in matrix(5, 5)) {
        let a = b.matmul(&b.transpose()).unwrap();
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        let trace: f64 = (0..5).map(|i| a.row(i)[i]).sum();
        prop_assert!((vals.iter().sum::<f64>() - trace).abs() < 1e-8 * (1.0 + trace.abs()));
        for (k, &lambda) in vals.iter().enumerate() {
            let v = vecs.column(k);
            let av = a.matvec(&v).unwrap();
            let res = av.iter().zip(&v).map(|(x, y)| (x - lambda * y).abs()).fold(0.0, f64::max);
            prop_assert!(res < 1e-8 * (1.0 + lambda.abs()));
        }
    }

    #[test]
    fn sparse_init_meets_budget(shapes in shapes(), sparsity in 0.0f64..0.95, er in any::<bool>(), seed in any::<u64>()) {
        let mode = if er { InitMode::Er } else { InitMode::Uniform };
        let m = sparse_init(&shapes, mode, sparsity, seed).unwrap();
        let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
        prop_assert_eq!(m.nonzeros(), ((1.0 - sparsity) * total as f64).round() as usize);
        for (mask, (r, c)) in m.masks.iter().zip(&shapes) {
            prop_assert!(mask.nonzeros() <= r * c);
        }
    }

    #[test]
    fn prune_regrow_conserves_nonzeros(
        shapes in shapes(),
        sparsity in 0.1f64..0.9,
        rate in 0.0f64..1.0,
        death in death_mode(),
        redist in redist_mode(),
        seed in any::<u64>(),
    ) {
        let masks = sparse_init(&shapes, InitMode::Uniform, sparsity, seed).unwrap();
        let mut rng = lsh_core::seed::rng_for(seed, "weights", 0);
        let weights: Vec<Vec<f64>> = shapes
            .iter()
            .map(|(r, c)| (0..r * c).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect())
            .collect();
        let views: Vec<&[f64]> = weights.iter().map(Vec::as_slice).collect();
        let before = masks.nonzeros();
        let (after_death, removed) = apply_death(&views, &masks, rate, death).unwrap();
        prop_assert_eq!(after_death.nonzeros() + removed.iter().sum::<usize>(), before);
        // Death only turns weights off.
        for (m0, m1) in masks.masks.iter().zip(&after_death.masks) {
            for j in 0..m0.len() {
                prop_assert!(m0.is_active(j) || !m1.is_active(j));
            }
        }
        let r = redistribute(&removed, &views, &after_death, redist).unwrap();
        prop_assert_eq!(r.quotas.iter().sum::<usize>(), removed.iter().sum::<usize>());
        let regrown = grow(&after_death, &r.quotas, seed).unwrap();
        prop_assert_eq!(regrown.nonzeros(), before);
    }

    #[test]
    fn pool_recurrence(n in 1usize..200, e in 1usize..6, m in 1usize..30, final_k in 1usize..8) {
        let t = pool_trajectory(n, e, m, final_k);
        prop_assert_eq!(t[0], n);
        prop_assert!(t.len() - 1 <= m.div_ceil(e));
        for w in t.windows(2) {
            let keep = keep_count(w[0], final_k);
            prop_assert_eq!(keep, final_k.max(w[0] / 2).min(w[0]));
            prop_assert_eq!(w[1], keep + generate_count(w[0], keep, final_k));
            prop_assert!(w[1] <= w[0]);
            prop_assert!(w[1] >= final_k.min(w[0]));
        }
    }

    #[test]
    fn l2_is_a_metric(p in prop::collection::vec(-10.0f64..10.0, 3), q in prop::collection::vec(-10.0f64..10.0, 3), r in prop::collection::vec(-10.0f64..10.0, 3)) {
        let d = |a: &[f64], b: &[f64]| distance(a, b, DistanceMetric::L2).unwrap();
        prop_assert_eq!(d(&p, &p), 0.0);
        prop_assert!((d(&p, &q) - d(&q, &p)).abs() < 1e-12);
        prop_assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-9);
    }

    #[test]
    fn cosine_is_bounded_and_scale_free(p in prop::collection::vec(0.1f64..10.0, 4), q in prop::collection::vec(-10.0f64..10.0, 4), s in 0.01f64..100.0) {
        prop_assume!(q.iter().any(|v| v.abs() > 1e-3));
        let d = distance(&p, &q, DistanceMetric::Cosine).unwrap();
        prop_assert!((0.0..=2.0).contains(&d));
        let scaled: Vec<f64> = p.iter().map(|v| v * s).collect();
        prop_assert!((distance(&scaled, &q, DistanceMetric::Cosine).unwrap() - d).abs() < 1e-9);
    }

    #[test]
    fn spectrum_stats_are_ordered(v in prop::collection::vec(-20.0f64..5.0, 1..40)) {
        let s = spectrum_stats(&v).unwrap();
        prop_assert!(s.min <= s.mean + 1e-12 && s.mean <= s.max + 1e-12);
        prop_assert!(s.variance >= 0.0);
        prop_assert!(s.variance <= (s.max - s.min).powi(2) / 4.0 + 1e-9);
    }

    #[test]
    fn cosine_decay_is_monotone(initial in 0.0f64..1.0, total in 1usize..50) {
        let mut prev = initial;
        for epoch in 0..=total + 3 {
            let r = cosine_decay(initial, epoch, total);
            prop_assert!(r <= prev + 1e-15 && r >= 0.0);
            prev = r;
        }
        prop_assert!(cosine_decay(initial, total, total).abs() < 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_round_trip(rhn in any::<bool>(), tied in any::<bool>(), sparsity in 0.0f64..0.9, seed in any::<u64>()) {
        let spec = ModelSpec {
            arch: if rhn { ArchKind::Rhn } else { ArchKind::StackedLstm },
            vocab: 9,
            embed: 5,
            hidden: 5,
            layers: 2,
            coupled: rhn,
            tied,
            dropout: 0.0,
        };
        let model = SparseModel::new(spec, InitMode::Er, sparsity, seed).unwrap();
        let back = from_bytes(&to_bytes(&model).unwrap()).unwrap();
        prop_assert_eq!(back, model);
    }
}
