use std::sync::Arc;

use dapspp_core::operators::{Conv2d, ForwardOperator, HdrClip, Identity, ImageShape, MaskInpaint, SharedOperator};
use dapspp_core::prior::tweedie_denoise;
use dapspp_core::rng::{normal_vec, stream, Purpose};
use dapspp_core::sampler::*;
use dapspp_core::*;
use rand::Rng;

fn config(n: usize, sigma_min: f64, sigma_bar: f64, eta0: f64, j: usize, seed: u64) -> SamplerConfig<f64> {
    SamplerConfig {
        schedule: NoiseSchedule::new(100.0, sigma_min, n, -7.0).unwrap(),
        step_sizes: StepSizeSchedule::new(eta0, 1e-2).unwrap(),
        refine: RefineConfig {
            sigma_ref: sigma_min,
            likelihood_gamma: Some(0.01),
            ..RefineConfig::likelihood_only(j, eta0)
        },
        sigma_bar,
        ode_steps_below_bar: 1,
        ode_method: OdeMethod::Rk4,
        seed,
        diagnostics: false,
        keep_snapshots: false,
    }
}

fn identity_instance(d: usize, gamma: f64, seed: u64) -> (IsotropicGaussianPrior<f64>, Measurement<f64>) {
    let prior = IsotropicGaussianPrior::new(vec![0.5; d], 0.05).unwrap();
    let x0 = prior.sample(&mut stream(seed, Purpose::Truth, 0));
    let e: Vec<f64> = normal_vec(&mut stream(seed, Purpose::Measurement, 0), d);
    let y = x0.iter().zip(e).map(|(a, b)| a + gamma * b).collect();
    let op: SharedOperator<f64> = Arc::new(Identity::new(ImageShape::line(d)));
    (prior, Measurement::new(y, gamma, op).unwrap())
}

#[test]
fn estep_matches_gaussian_closed_forms() {
    let (mu, tau2) = (0.3_f64, 0.5_f64);
    let prior = IsotropicGaussianPrior::new(vec![mu], tau2).unwrap();
    let hi = estep(&prior, &[4.0], 20.0, 0.5, 1, OdeMethod::Rk4).unwrap();
    let want = (tau2 * 4.0 + 400.0 * mu) / (tau2 + 400.0);
    assert!((hi.x0_hat[0] - want).abs() < 1e-12);
    // below the threshold the E-step is the flow map to the σ floor, not the conditional mean
    let lo = estep(&prior, &[0.9], 0.4, 0.5, 10, OdeMethod::Rk4).unwrap();
    let f = SIGMA_FLOOR;
    let want = mu + (0.9 - mu) * ((tau2 + f * f) / (tau2 + 0.16f64)).sqrt();
    assert!((lo.x0_hat[0] - want).abs() < 1e-6, "{} vs {want}", lo.x0_hat[0]);
    assert_eq!((lo.branch, lo.nfe), (EStepBranch::Ode, 40));
}

#[test]
fn renoise_variance_matches_level() {
    let x0 = vec![0.2_f64, -0.4, 1.0, 0.0];
    let sigma = 0.7;
    let mut rng = stream(31, Purpose::Renoise, 0);
    let n = 100_000;
    let mut s2 = vec![0.0; 4];
    for _ in 0..n {
        let x = renoise(&x0, sigma, &mut rng).unwrap();
        for i in 0..4 {
            s2[i] += (x[i] - x0[i]).powi(2);
        }
    }
    for v in s2 {
        assert!((v / n as f64 / (sigma * sigma) - 1.0).abs() < 0.03);
    }
    assert!(renoise(&x0, 0.0, &mut rng).is_err());
}

#[test]
fn nfe_bookkeeping_for_the_three_samplers() {
    let (prior, m) = identity_instance(8, 0.05, 1);
    let cfg = config(51, 0.1, 0.5, 1e-4, 2, 1);
    let out = run_dapspp(&prior, &m, &cfg).unwrap();
    let t = &out.trace;
    assert!((90..=110).contains(&t.total_nfe), "{}", t.total_nfe);
    assert_eq!(t.total_nfe, 98);
    assert_eq!(t.cycles.len(), 50);
    let per_cycle: usize = t
        .cycles
        .iter()
        .map(|c| match c.branch {
            EStepBranch::Tweedie => 1,
            EStepBranch::Ode => 4,
        })
        .sum();
    assert_eq!(per_cycle, t.total_nfe);
    assert!(t.cycles.windows(2).all(|w| w[0].nfe <= w[1].nfe));
    assert_eq!(t.cycles.last().unwrap().nfe, t.total_nfe);

    let daps_cfg = SamplerConfig {
        ode_steps_below_bar: 2,
        refine: RefineConfig { n_steps: 100, with_prior: true, ..cfg.refine },
        ..cfg
    };
    let daps = run_daps_baseline(&prior, &m, &daps_cfg).unwrap();
    assert_eq!(daps.trace.total_nfe, 100);
    assert_eq!(daps.trace.prior_evals, 50 * 100);

    let dps = run_dps_baseline(&prior, &m, &cfg).unwrap();
    assert_eq!(dps.trace.total_nfe, 50);
}

#[test]
fn nfe_is_monotone_in_the_threshold() {
    let (prior, m) = identity_instance(4, 0.05, 2);
    let nfes: Vec<usize> = [0.2, 0.5, 1.0, 2.0, 5.0]
        .iter()
        .map(|&sb| run_dapspp(&prior, &m, &config(51, 0.1, sb, 1e-4, 2, 2)).unwrap().trace.total_nfe)
        .collect();
    assert!(nfes.windows(2).all(|w| w[0] <= w[1]), "{nfes:?}");
}

#[test]
fn annealing_levels_follow_the_schedule() {
    let (prior, m) = identity_instance(4, 0.05, 3);
    let cfg = config(11, 0.1, 0.5, 1e-4, 2, 3);
    let sigmas = cfg.schedule.sigmas();
    let out = run_dapspp(&prior, &m, &cfg).unwrap();
    for (k, c) in out.trace.cycles.iter().enumerate() {
        assert_eq!(c.cycle, k + 1);
        assert_eq!(c.sigma, sigmas[k]);
        assert_eq!(c.sigma_next, (k + 1 < 10).then(|| sigmas[k + 1]));
        assert_eq!(c.eta, cfg.step_sizes.for_cycle(k + 1, 10));
    }
    assert_eq!(out.trace.refine.len(), 10 * 3);
}

#[test]
fn runs_are_deterministic_per_seed() {
    let (prior, m) = identity_instance(6, 0.05, 4);
    let cfg = SamplerConfig { diagnostics: true, keep_snapshots: true, ..config(21, 0.1, 0.5, 1e-4, 3, 4) };
    let a = run_dapspp(&prior, &m, &cfg).unwrap();
    let b = run_dapspp(&prior, &m, &cfg).unwrap();
    assert_eq!(a.x, b.x);
    assert_eq!(a.trace.cycles, b.trace.cycles);
    assert_eq!(a.trace.snapshots.len(), 20);
    let c = run_dapspp(&prior, &m, &SamplerConfig { seed: 5, ..cfg }).unwrap();
    assert_ne!(a.x, c.x);
}

#[test]
fn identity_runs_land_on_the_noise_floor() {
    for seed in 0..5 {
        let (prior, m) = identity_instance(64, 0.05, seed);
        let out = run_dapspp(&prior, &m, &config(51, 0.05, 0.5, 1e-4, 8, seed)).unwrap();
        let ratio = m.residual_ratio(&out.x).unwrap();
        assert!((0.5..=1.5).contains(&ratio), "seed {seed}: {ratio}");
    }
}

#[test]
fn coupled_and_decomposed_updates_agree() {
    let img = ImageShape::new(6, 6);
    let prior = GmmPrior::new(
        vec![0.4, 0.6],
        vec![vec![0.2; 36], vec![0.7; 36]],
        vec![Mat::identity(36).scaled(0.05), Mat::identity(36).scaled(0.1)],
    )
    .unwrap();
    let ops: Vec<SharedOperator<f64>> = vec![
        Arc::new(Conv2d::gaussian(img, 3, 1.0).unwrap()),
        Arc::new(MaskInpaint::centered_box(img, 2, 2).unwrap()),
        Arc::new(HdrClip::new(img, 2.0).unwrap()),
    ];
    let mut rng = stream(40, Purpose::Probe, 0);
    for op in ops {
        let y: Vec<f64> = normal_vec(&mut rng, op.output_len());
        let m = Measurement::new(y, 0.05, op.clone()).unwrap();
        for seed in 0..50 {
            let sigma: f64 = rng.random_range(0.1..50.0);
            let xt: Vec<f64> = normal_vec::<f64, _>(&mut rng, 36).iter().map(|v| 0.5 + sigma * v).collect();
            let eq = dps_equivalence_check(&prior, &m, &xt, sigma, 0.8 * sigma, 1e-3, seed).unwrap();
            assert!(eq.relative_diff <= 1e-9, "{}: {}", op.name(), eq.relative_diff);
        }
        let xt: Vec<f64> = normal_vec(&mut rng, 36);
        let eq = dps_equivalence_check(&prior, &m, &xt, 2.0, 1.5, 0.0, 9).unwrap();
        assert_eq!(eq.max_abs_diff, 0.0);
        let z: Vec<f64> = normal_vec(&mut stream(9, Purpose::Renoise, 0), 36);
        let want = renoise_with(&tweedie_denoise(&prior, &xt, 2.0).unwrap(), 1.5, &z);
        assert_eq!(eq.decomposed, want);
    }
}

#[test]
fn dps_baseline_stays_finite() {
    for seed in 0..20 {
        let (prior, m) = identity_instance(16, 0.05, seed);
        let out = run_dps_baseline(&prior, &m, &config(51, 0.1, 0.5, 1e-3, 1, seed)).unwrap();
        assert!(out.x.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn divergent_step_sizes_abort_with_non_finite_error() {
    let (prior, m) = identity_instance(8, 0.05, 0);
    let cfg = config(51, 0.1, 0.5, 1.0, 20, 0);
    match run_dapspp(&prior, &m, &cfg) {
        Err(Error::NonFinite { .. }) => {}
        other => panic!("expected a non-finite abort, got {:?}", other.map(|o| o.x)),
    }
}

#[test]
fn single_precision_tracks_double_precision() {
    let (prior64, m64) = identity_instance(16, 0.05, 7);
    let cfg64 = config(51, 0.05, 0.5, 1e-4, 8, 7);
    let out64 = run_dapspp(&prior64, &m64, &cfg64).unwrap();

    let prior = IsotropicGaussianPrior::<f32>::new(vec![0.5; 16], 0.05).unwrap();
    let op: SharedOperator<f32> = Arc::new(Identity::new(ImageShape::line(16)));
    let m = Measurement::new(m64.y.iter().map(|&v| v as f32).collect(), 0.05, op).unwrap();
    let cfg = SamplerConfigF32 {
        schedule: NoiseSchedule::new(100.0, 0.05, 51, -7.0).unwrap(),
        step_sizes: StepSizeSchedule::new(1e-4, 1e-2).unwrap(),
        refine: RefineConfig { sigma_ref: 0.05, likelihood_gamma: Some(0.01), ..RefineConfig::likelihood_only(8, 1e-4) },
        sigma_bar: 0.5,
        ode_steps_below_bar: 1,
        ode_method: OdeMethod::Rk4,
        seed: 7,
        diagnostics: false,
        keep_snapshots: false,
    };
    let out = run_dapspp(&prior, &m, &cfg).unwrap();
    assert_eq!(out.trace.total_nfe, out64.trace.total_nfe);
    for (a, b) in out.x.iter().zip(&out64.x) {
        assert!((*a as f64 - b).abs() < 1e-3, "{a} vs {b}");
    }
}

#[test]
fn invalid_threshold_is_rejected() {
    let (prior, m) = identity_instance(4, 0.05, 0);
    assert!(run_dapspp(&prior, &m, &config(51, 0.1, 0.05, 1e-4, 2, 0)).is_err());
    assert!(ForwardOperator::<f64>::is_linear(&Identity::new(ImageShape::line(1))));
}
