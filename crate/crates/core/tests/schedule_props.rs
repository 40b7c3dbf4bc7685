use dapspp_core::schedule::{build_schedule, sigma_threshold, step_size};
use dapspp_core::StepSizeSchedule;
use proptest::prelude::*;

proptest! {
    #[test]
    fn schedules_are_strictly_decreasing_with_exact_endpoints(
        sigma_max in 1.0f64..500.0,
        ratio in 1e-4f64..0.5,
        n in 2usize..200,
        rho in prop_oneof![-10.0f64..-0.5, 0.5f64..10.0],
    ) {
        let sigma_min = sigma_max * ratio;
        let s = build_schedule(sigma_max, sigma_min, n, rho).unwrap();
        prop_assert_eq!(s.len(), n);
        prop_assert_eq!(s[0], sigma_max);
        prop_assert_eq!(s[n - 1], sigma_min);
        prop_assert!(s.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(s.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn negative_rho_puts_more_points_at_low_noise(tau in 0.11f64..99.0, n in 3usize..120) {
        let count = |rho: f64| build_schedule(100.0, 0.1, n, rho).unwrap().iter().filter(|&&s| s < tau).count();
        let neg = [count(-7.0), count(-5.0), count(-2.0)];
        let pos = [count(2.0), count(5.0), count(7.0)];
        prop_assert!(neg.iter().min() >= pos.iter().max(), "{:?} {:?}", neg, pos);
        // large |ρ| tends to geometric spacing, so within a sign the count rises with ρ
        prop_assert!(neg.windows(2).all(|w| w[0] <= w[1]), "{:?}", neg);
        prop_assert!(pos.windows(2).all(|w| w[0] <= w[1]), "{:?}", pos);
    }

    #[test]
    fn step_size_is_affine_and_bounded(eta0 in 1e-6f64..1e-2, delta in 1e-3f64..1.0, t in 0.0f64..1.0) {
        let sched = StepSizeSchedule::new(eta0, delta).unwrap();
        let eta = step_size(&sched, t, 1.0).unwrap();
        prop_assert!(eta >= eta0 * delta * (1.0 - 1e-12) && eta <= eta0 * (1.0 + 1e-12));
        let lo = step_size(&sched, 0.0, 1.0).unwrap();
        let hi = step_size(&sched, 1.0, 1.0).unwrap();
        prop_assert!((eta - (lo + t * (hi - lo))).abs() <= 1e-12 * eta0);
    }
}

#[test]
fn threshold_and_density_examples() {
    assert!((sigma_threshold(0.05_f64, 10.0).unwrap() - 0.5).abs() < 1e-15);
    assert!((sigma_threshold(0.05_f64, 4.0).unwrap() - 0.2).abs() < 1e-15);
    let count = |rho: f64| build_schedule(100.0, 0.1, 50, rho).unwrap().iter().filter(|&&s| s <= 0.5).count();
    assert!(count(-7.0) > count(7.0));
}
