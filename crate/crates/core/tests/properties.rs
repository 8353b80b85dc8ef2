use fbc2c::basis::{BasisSpec, BasisSystem, FemBasis1D, RfmBasis, RfmSpec, WindowKind};
use fbc2c::encoder::{self, EncodeConfig, Encoder};
use fbc2c::io::Container;
use fbc2c::neuralop::{self, TrainConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| data[(i * cols + j) % data.len()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn windows_sum_to_one(
        parts in prop::collection::vec(1usize..7, 1..3),
        lo in -2.0f64..0.0,
        width in 0.5f64..3.0,
        smooth in any::<bool>(),
        fracs in prop::collection::vec(0.0f64..1.0, 2),
    ) {
        let dim = parts.len();
        let kind = if smooth { WindowKind::Smooth } else { WindowKind::Characteristic };
        let spec = RfmSpec::new(parts, 1, 1.0, 0).with_window(kind).with_bounds(vec![[lo, lo + width]; dim]);
        let basis = RfmBasis::new(dim, &spec).unwrap();
        let x: Vec<f64> = fracs[..dim].iter().map(|f| lo + f * width).collect();
        let total: f64 = basis.partitions().iter().map(|p| p.window(&x)).sum();
        prop_assert!((total - 1.0).abs() < 1e-12, "sum {total} at {x:?}");
    }

    #[test]
    fn rfm_values_are_bounded(
        parts in 1usize..5,
        features in 1usize..6,
        range in 0.1f64..10.0,
        seed in any::<u64>(),
    ) {
        let spec = BasisSpec::Rfm(RfmSpec::new(vec![parts, parts], features, range, seed).with_bounds(vec![[0.0, 1.0]; 2]));
        let basis = BasisSystem::build(2, &spec).unwrap();
        let pts = fbc2c::basis::uniform_grid(0.0, 1.0, 9, 2);
        let d = basis.design_matrix(&pts).unwrap();
        prop_assert!(d.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn fem_reproduces_piecewise_linear_functions(
        gaps in prop::collection::vec(0.01f64..1.0, 1..12),
        values in prop::collection::vec(-5.0f64..5.0, 13),
        frac in 0.0f64..=1.0,
    ) {
        let mut nodes = vec![0.0];
        for g in &gaps {
            nodes.push(nodes.last().unwrap() + g);
        }
        let g = &values[..nodes.len()];
        let x = nodes[0] + frac * (nodes[nodes.len() - 1] - nodes[0]);
        let fem = FemBasis1D::new(nodes.clone()).unwrap();
        let row = fem.design_matrix(&DMatrix::from_element(1, 1, x)).unwrap();
        let got: f64 = row.iter().zip(g).map(|(p, v)| p * v).sum();
        let k = nodes.windows(2).position(|w| x <= w[1]).unwrap_or(nodes.len() - 2);
        let t = (x - nodes[k]) / (nodes[k + 1] - nodes[k]);
        let expected = g[k] * (1.0 - t) + g[k + 1] * t;
        prop_assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn ridge_minimizes_penalized_residual(
        n in 3usize..20,
        m in 1usize..6,
        data in prop::collection::vec(-1.0f64..1.0, 64),
        lambda in 1e-4f64..1.0,
        dir in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let phi = matrix(n, m, &data);
        let f = DMatrix::from_fn(1, n, |_, j| (j as f64 * 0.7).sin());
        let a = Encoder::new(&phi, n, EncodeConfig::ridge(lambda)).unwrap().encode(&f).unwrap().transpose();
        let penalty = lambda * n as f64;
        let cost = |a: &DMatrix<f64>| (&phi * a - f.transpose()).norm_squared() + penalty * a.norm_squared();
        let stationarity = phi.transpose() * (&phi * &a - f.transpose()) + &a * penalty;
        prop_assert!(stationarity.amax() < 1e-9 * (1.0 + a.amax()));
        let delta = DMatrix::from_fn(m, 1, |i, _| dir[i] * 1e-3);
        prop_assert!(cost(&(&a + &delta)) >= cost(&a) - 1e-12);
    }

    #[test]
    fn effective_rank_is_scale_invariant(
        rows in 2usize..12,
        cols in 2usize..8,
        data in prop::collection::vec(-1.0f64..1.0, 96),
        scale in 1e-3f64..1e3,
    ) {
        let a = matrix(rows, cols, &data);
        let e = encoder::diagnostics(&a).unwrap().effective_rank;
        let es = encoder::diagnostics(&(&a * scale)).unwrap().effective_rank;
        prop_assert!((e - es).abs() < 1e-10);
        prop_assert!(e >= 1.0 - 1e-12 && e <= rows.min(cols) as f64 + 1e-12);
    }

    #[test]
    fn container_round_trip_is_bitwise(
        shapes in prop::collection::vec((1usize..5, 1usize..5), 1..4),
        bits in prop::collection::vec(any::<u64>(), 16),
        key in "[a-z]{1,8}",
    ) {
        let mut c = Container::with_metadata(serde_json::json!({ "kind": "test", "key": key }));
        for (i, (r, k)) in shapes.iter().enumerate() {
            let data: Vec<f64> = (0..r * k).map(|j| f64::from_bits(bits[(i + j) % bits.len()])).collect();
            c.push(&format!("a{i}"), vec![*r, *k], data).unwrap();
        }
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.arrays().len(), c.arrays().len());
        for (x, y) in c.arrays().iter().zip(back.arrays()) {
            prop_assert_eq!(&x.name, &y.name);
            prop_assert_eq!(&x.shape, &y.shape);
            let xb: Vec<u64> = x.data.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(xb, yb);
        }
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn trained_error_never_beats_projection(
        samples in 1usize..6,
        n in 4usize..15,
        m in 1usize..4,
        data in prop::collection::vec(-1.0f64..1.0, 80),
    ) {
        let design = matrix(n, m, &data);
        let coeffs = DMatrix::from_fn(samples, m, |i, j| data[(7 * i + 3 * j + 1) % data.len()]);
        let u = DMatrix::from_fn(samples, n, |i, j| ((i + 1) as f64 * (j as f64 + 0.5)).cos());
        let loss = neuralop::relative_loss(&coeffs, &design, &u).unwrap();
        let best = encoder::best_approximation_error(&design, &u).unwrap();
        for (l, b) in loss.per_sample.iter().zip(&best.per_sample) {
            if let Some(b) = b {
                prop_assert!(*l >= b - 1e-9);
            }
        }
    }

    #[test]
    fn relative_loss_is_scale_invariant(
        samples in 1usize..5,
        data in prop::collection::vec(-1.0f64..1.0, 40),
        scale in 1e-3f64..1e3,
    ) {
        let design = matrix(6, 3, &data);
        let coeffs = DMatrix::from_fn(samples, 3, |i, j| data[(5 * i + j + 2) % data.len()]);
        let u = DMatrix::from_fn(samples, 6, |i, j| (i as f64 + 1.0) * (j as f64 - 2.5));
        let a = neuralop::relative_loss(&coeffs, &design, &u).unwrap().mean;
        let b = neuralop::relative_loss(&(&coeffs * scale), &design, &(&u * scale)).unwrap().mean;
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn schedule_hits_both_endpoints(epochs in 2usize..40_000, stage in 1usize..20_000) {
        let cfg = TrainConfig { lr_stage_epochs: stage, ..TrainConfig::with_epochs(epochs) };
        let first = neuralop::learning_rate(0, epochs, &cfg);
        let last = neuralop::learning_rate(epochs - 1, epochs, &cfg);
        prop_assert!((first - cfg.lr_start).abs() <= 1e-15);
        prop_assert!((last / cfg.lr_end - 1.0).abs() < 1e-2);
    }
}
