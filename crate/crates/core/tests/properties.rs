use must_core::masking::{sample_mask, MaskGeometry};
use must_core::params::{Params, Tensor};
use must_core::teacher::{decay_at, EmaSchedule, TeacherState, MU_MAX};
use must_core::trainer::{cosine_lr, layerwise_lrs};
use proptest::prelude::*;

fn scalar(v: f64) -> Params {
    let mut t = Tensor::zeros("w", &[1]);
    t.data[0] = v;
    Params::from_tensors(vec![t])
}

proptest! {
    #[test]
    fn ema_gap_shrinks_geometrically(delta0 in -10.0f64..10.0, theta in -10.0f64..10.0, mu in 0.0f64..0.999, steps in 1usize..200) {
        let schedule = EmaSchedule::new(0.9, 10).unwrap();
        let mut teacher = TeacherState::init(&scalar(delta0), schedule);
        let target = scalar(theta);
        for _ in 0..steps {
            teacher.update_with_decay(&target, mu).unwrap();
        }
        let gap = (teacher.delta.tensors()[0].data[0] - theta).abs();
        let expected = mu.powi(steps as i32) * (delta0 - theta).abs();
        prop_assert!((gap - expected).abs() <= 1e-10, "gap {gap} expected {expected}");
    }

    #[test]
    fn decay_ramp_is_monotone_and_bounded(mu0 in 0.5f64..MU_MAX, mu_n in 0u64..5000, step in 0u64..10_000) {
        let mu = decay_at(step, mu0, mu_n, MU_MAX);
        prop_assert!(mu >= mu0 && mu <= MU_MAX);
        prop_assert!(decay_at(step + 1, mu0, mu_n, MU_MAX) >= mu);
        if step >= mu_n {
            prop_assert_eq!(mu, MU_MAX);
        }
    }

    #[test]
    fn masks_are_unit_aligned_with_exact_counts(
        grid_units in 1usize..=8,
        unit_side in 1usize..=4,
        patch in prop::sample::select(vec![2usize, 4, 8, 16]),
        percent in 0usize..=100,
        seed in any::<u64>(),
    ) {
        let grid = grid_units * unit_side;
        prop_assume!(grid <= 16);
        let geo = MaskGeometry::new(grid, patch, patch * unit_side).unwrap();
        let ratio = percent as f64 / 100.0;
        let mask = sample_mask(geo, ratio, seed).unwrap();
        let u = unit_side * unit_side;
        // exact ceil(percent·G / (100·u)) in integers
        let units = (percent * grid * grid).div_ceil(100 * u);
        prop_assert_eq!(mask.len(), units * u);
        prop_assert!(mask.is_unit_aligned());
        prop_assert_eq!(sample_mask(geo, ratio, seed).unwrap(), mask);
    }

    #[test]
    fn cosine_schedule_stays_in_range(total in 1u64..10_000, frac in 0.0f64..=1.0, lr in 1e-6f64..1.0) {
        let step = (frac * total as f64) as u64;
        let v = cosine_lr(step, total, lr);
        prop_assert!(v >= 0.0 && v <= lr);
        if step < total {
            prop_assert!(cosine_lr(step + 1, total, lr) <= v);
        }
    }

    #[test]
    fn layer_rates_form_geometric_sequence(depth in 1usize..24, decay in 0.05f64..=1.0) {
        let rates = layerwise_lrs(1.0, decay, depth);
        prop_assert_eq!(rates.len(), depth + 2);
        prop_assert_eq!(rates[depth + 1], 1.0);
        for (i, r) in rates.iter().enumerate() {
            prop_assert!((r - decay.powi((depth + 1 - i) as i32)).abs() <= 1e-15);
        }
    }
}
