//! Alternating E–M sampler and its two coupled baselines.
//!
//! Cycle `k = 1..=K` (with `K = N − 1` for an `N`-point schedule) denoises the
//! state at `σ_{k−1}`, refines the estimate against the measurement, and
//! re-noises to `σ_k` unless it is the last cycle.

use crate::diagnostics::{gradient_pair, Kappa};
use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::{all_finite, dot, max_abs_diff, norm};
use crate::odesolve::{integrate_pf_ode, OdeMethod, SIGMA_FLOOR};
use crate::operators::{likelihood_grad, residual, GradConvention, Measurement};
use crate::prior::{tweedie_denoise, ScoreModel};
use crate::refine::{mcmc_refine, RefineConfig, RefineStep};
use crate::rng::{normal_vec, stream, Purpose};
use crate::scalar::Real;
use crate::schedule::{NoiseSchedule, StepSizeSchedule};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig<T> {
    pub schedule: NoiseSchedule<T>,
    pub step_sizes: StepSizeSchedule<T>,
    /// M-step settings; `eta` is overwritten per cycle from `step_sizes`.
    pub refine: RefineConfig<T>,
    /// Tweedie above this level, ODE at or below it.
    pub sigma_bar: T,
    pub ode_steps_below_bar: usize,
    pub ode_method: OdeMethod,
    pub seed: u64,
    /// Record κ, A_t and the score norm at x̂₀ each cycle (extra score
    /// evaluations, not counted as NFE).
    pub diagnostics: bool,
    pub keep_snapshots: bool,
}

impl<T: Real> SamplerConfig<T> {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.step_sizes.validate()?;
        self.refine.with_eta(self.step_sizes.eta0).validate()?;
        if !(self.sigma_bar > self.schedule.sigma_min && self.sigma_bar < self.schedule.sigma_max) {
            return Err(invalid(
                "sigma_bar",
                format!(
                    "threshold {} must lie strictly between sigma_min and sigma_max",
                    self.sigma_bar
                ),
            ));
        }
        if self.ode_steps_below_bar == 0 {
            return Err(invalid("ode_steps_below_bar", "need at least one ODE step"));
        }
        Ok(())
    }

    pub fn n_cycles(&self) -> usize {
        self.schedule.n_steps - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EStepBranch {
    Tweedie,
    Ode,
}

impl EStepBranch {
    pub fn as_str(self) -> &'static str {
        match self {
            EStepBranch::Tweedie => "tweedie",
            EStepBranch::Ode => "ode",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EStepOutput<T> {
    pub x0_hat: Vec<T>,
    pub nfe: usize,
    pub branch: EStepBranch,
}

/// Tweedie (1 evaluation) above `sigma_bar`, otherwise the probability-flow
/// ODE down to the σ floor.
pub fn estep<T: Real, M: ScoreModel<T> + ?Sized>(
    model: &M,
    x_in: &[T],
    sigma_in: T,
    sigma_bar: T,
    ode_steps: usize,
    method: OdeMethod,
) -> Result<EStepOutput<T>> {
    if !(sigma_in > T::zero()) {
        return Err(invalid("sigma_in", "E-step needs a positive noise level"));
    }
    if sigma_in > sigma_bar || sigma_in <= T::of(SIGMA_FLOOR) {
        return Ok(EStepOutput {
            x0_hat: tweedie_denoise(model, x_in, sigma_in)?,
            nfe: 1,
            branch: EStepBranch::Tweedie,
        });
    }
    let sol = integrate_pf_ode(model, x_in, sigma_in, T::zero(), ode_steps, method)?;
    Ok(EStepOutput {
        x0_hat: sol.x,
        nfe: sol.nfe,
        branch: EStepBranch::Ode,
    })
}

/// `x̃₀ + σ·ε`.
pub fn renoise_with<T: Real>(x0: &[T], sigma_next: T, eps: &[T]) -> Vec<T> {
    x0.iter().zip(eps).map(|(&x, &e)| x + sigma_next * e).collect()
}

pub fn renoise<T: Real, R: rand::Rng + ?Sized>(x0: &[T], sigma_next: T, rng: &mut R) -> Result<Vec<T>> {
    if !(sigma_next > T::zero()) {
        return Err(invalid("sigma_next", "re-noising level must be positive"));
    }
    let eps: Vec<T> = normal_vec(rng, x0.len());
    Ok(renoise_with(x0, sigma_next, &eps))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CycleRecord<T> {
    pub cycle: usize,
    /// Level of the E-step input, `σ_{k−1}`.
    pub sigma: T,
    /// Re-noising level `σ_k`, `None` after the last cycle.
    pub sigma_next: Option<T>,
    pub branch: EStepBranch,
    pub eta: T,
    /// Cumulative score evaluations after this cycle's E-step.
    pub nfe: usize,
    /// `‖y − A(x̃₀)‖` after the M-step.
    pub residual_norm: T,
    pub kappa: Option<Kappa<T>>,
    pub inner_product: Option<T>,
    /// `‖score(x̂₀, σ_ref)‖`.
    pub score_norm_x0: Option<T>,
}

#[derive(Clone, Debug, Default)]
pub struct Trace<T> {
    pub cycles: Vec<CycleRecord<T>>,
    /// `(cycle, row)` for every M-step iterate.
    pub refine: Vec<(usize, RefineStep<T>)>,
    /// E-step score evaluations.
    pub total_nfe: usize,
    /// Prior-score evaluations made inside M-steps.
    pub prior_evals: usize,
    /// `x̂₀` of every cycle, when snapshots are kept.
    pub snapshots: Vec<Vec<T>>,
    /// E-step input `x_t` of every cycle, when snapshots are kept.
    pub states: Vec<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct SamplerOutput<T> {
    pub x: Vec<T>,
    pub trace: Trace<T>,
}

fn ensure_finite<T: Real>(x: &[T], cycle: usize, stage: &'static str) -> Result<()> {
    if all_finite(x) {
        Ok(())
    } else {
        Err(Error::NonFinite { cycle, stage })
    }
}

fn initial_state<T: Real, M: ScoreModel<T> + ?Sized>(model: &M, sigma_max: T, seed: u64) -> Vec<T> {
    let eps: Vec<T> = normal_vec(&mut stream(seed, Purpose::Init, 0), model.dim());
    eps.into_iter().map(|e| sigma_max * e).collect()
}

struct CycleDiag<T> {
    kappa: Kappa<T>,
    inner: T,
    score_norm: T,
}

fn cycle_diagnostics<T: Real, M: ScoreModel<T> + ?Sized>(
    model: &M,
    measurement: &Measurement<T>,
    cfg: &SamplerConfig<T>,
    x_in: &[T],
    x0_hat: &[T],
    sigma: T,
) -> Result<CycleDiag<T>> {
    let gamma = cfg.refine.likelihood_gamma.unwrap_or(measurement.gamma);
    let pair = gradient_pair(model, measurement.operator.as_ref(), x_in, &measurement.y, gamma, sigma)?;
    Ok(CycleDiag {
        kappa: Kappa::from_pair(&pair),
        inner: dot(&pair.likelihood, &pair.prior),
        score_norm: norm(&model.score(x0_hat, cfg.refine.sigma_ref)?),
    })
}

/// Shared annealing loop; `estep_fn` returns the E-step output for cycle `k`.
fn anneal<T: Real, M: ScoreModel<T> + ?Sized, E>(
    model: &M,
    measurement: &Measurement<T>,
    cfg: &SamplerConfig<T>,
    mut estep_fn: E,
) -> Result<SamplerOutput<T>>
where
    E: FnMut(&[T], T) -> Result<EStepOutput<T>>,
{
    cfg.validate()?;
    check_len("sampler", model.dim(), measurement.operator.input_len())?;
    let sigmas = cfg.schedule.sigmas();
    let k_total = sigmas.len() - 1;
    let mut x = initial_state(model, cfg.schedule.sigma_max, cfg.seed);
    let mut trace = Trace::default();
    let mut x0 = x.clone();
    for k in 1..=k_total {
        let sigma = sigmas[k - 1];
        let e = estep_fn(&x, sigma)?;
        ensure_finite(&e.x0_hat, k, "e-step")?;
        trace.total_nfe += e.nfe;
        let diag = if cfg.diagnostics {
            Some(cycle_diagnostics(model, measurement, cfg, &x, &e.x0_hat, sigma)?)
        } else {
            None
        };
        let eta = cfg.step_sizes.for_cycle(k, k_total);
        let rcfg = cfg.refine.with_eta(eta);
        let mut rng = stream(cfg.seed, Purpose::Refine, k as u64);
        let out = mcmc_refine(&e.x0_hat, measurement, model, &rcfg, &mut rng)?;
        ensure_finite(&out.x, k, "m-step")?;
        trace.prior_evals += out.prior_evals;
        trace.refine.extend(out.trace.iter().map(|r| (k, *r)));
        let sigma_next = (k < k_total).then(|| sigmas[k]);
        trace.cycles.push(CycleRecord {
            cycle: k,
            sigma,
            sigma_next,
            branch: e.branch,
            eta,
            nfe: trace.total_nfe,
            residual_norm: out.final_residual_norm(),
            kappa: diag.as_ref().map(|d| d.kappa),
            inner_product: diag.as_ref().map(|d| d.inner),
            score_norm_x0: diag.as_ref().map(|d| d.score_norm),
        });
        if cfg.keep_snapshots {
            trace.snapshots.push(e.x0_hat.clone());
            trace.states.push(x.clone());
        }
        x0 = out.x;
        if let Some(s) = sigma_next {
            x = renoise(&x0, s, &mut stream(cfg.seed, Purpose::Renoise, k as u64))?;
            ensure_finite(&x, k, "renoise")?;
        }
    }
    Ok(SamplerOutput { x: x0, trace })
}

/// Decoupled E–M sampler: one-shot Tweedie or ODE E-step, likelihood-only
/// Langevin M-step, re-noise.
pub fn run_dapspp<T: Real, M: ScoreModel<T> + ?Sized>(
    model: &M,
    measurement: &Measurement<T>,
    cfg: &SamplerConfig<T>,
) -> Result<SamplerOutput<T>> {
    anneal(model, measurement, cfg, |x, sigma| {
        estep(model, x, sigma, cfg.sigma_bar, cfg.ode_steps_below_bar, cfg.ode_method)
    })
}

/// Interleaved baseline: a few Euler steps of the probability-flow ODE at
/// every level (`ode_steps_below_bar` steps; `sigma_bar` is ignored), then
/// the configured M-step, which normally includes the prior term.
pub fn run_daps_baseline<T: Real, M: ScoreModel<T> + ?Sized>(
    model: &M,
    measurement: &Measurement<T>,
    cfg: &SamplerConfig<T>,
) -> Result<SamplerOutput<T>> {
    anneal(model, measurement, cfg, |x, sigma| {
        let sol = integrate_pf_ode(model, x, sigma, T::zero(), cfg.ode_steps_below_bar, OdeMethod::Euler)?;
        Ok(EStepOutput {
            x0_hat: sol.x,
            nfe: sol.nfe,
            branch: EStepBranch::Ode,
        })
    })
}

/// `∇_{x₀}‖y − A(x₀)‖² = −2·J(x₀)ᵀ r`.
fn squared_residual_grad<T: Real>(measurement: &Measurement<T>, x0: &[T]) -> Result<Vec<T>> {
    // the exact-score convention at γ = 1 is Jᵀr
    let g = likelihood_grad(
        measurement.operator.as_ref(),
        x0,
        &measurement.y,
        T::one(),
        GradConvention::Exact,
    )?;
    Ok(g.into_iter().map(|v| -T::of(2.0) * v).collect())
}

/// Coupled update `x' = x + σ_t²·s + σ_{t−1}·z − η_t·∇_{x₀}‖y − A(x₀)‖²` at
/// `x₀ = Tweedie(x)`, written as one expression.
pub fn dps_coupled_step<T: Real, M: ScoreModel<T> + ?Sized>(
    model: &M,
    measurement: &Measurement<T>,
    x_t: &[T],
    sigma_t: T,
    sigma_next: T,
    eta_t: T,
    z: &[T],
) -> Result<Vec<T>> {
    let s = model.score(x_t, sigma_t)?;
    let s2 = sigma_t * sigma_t;
    let x0: Vec<T> = x_t.iter().zip(&s).map(|(&x, &v)| x + s2 * v).collect();
    let g = squared_residual_grad(measurement, &x0)?;
    Ok((0..x_t.len())
        .map(|i| x_t[i] + s2 * s[i] + sigma_next * z[i] - eta_t * g[i])
        .collect())
}

/// The same update as three stages: Tweedie E-step, one noiseless gradient
/// M-step at x̂₀, re-noise with `z`.
pub fn dps_decomposed_step<T: Real, M: ScoreModel<T> + ?Sized>(
    model: &M,
    measurement: &Measurement<T>,
    x_t: &[T],
    sigma_t: T,
    sigma_next: T,
    eta_t: T,
    z: &[T],
) -> Result<Vec<T>> {
    let x0 = tweedie_denoise(model, x_t, sigma_t)?;
    let g = squared_residual_grad(measurement, &x0)?;
    let refined: Vec<T> = x0.iter().zip(&g).map(|(&x, &v)| x - eta_t * v).collect();
    Ok(renoise_with(&refined, sigma_next, z))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceCheck<T> {
    pub coupled: Vec<T>,
    pub decomposed: Vec<T>,
    pub max_abs_diff: T,
    /// `max_abs_diff / max(1, ‖coupled‖_∞)`.
    pub relative_diff: T,
}

/// Runs both forms with the same Gaussian draw `z` from `seed`.
pub fn dps_equivalence_check<T: Real, M: ScoreModel<T> + ?Sized>(
    model: &M,
    measurement: &Measurement<T>,
    x_t: &[T],
    sigma_t: T,
    sigma_next: T,
    eta_t: T,
    seed: u64,
) -> Result<EquivalenceCheck<T>> {
    let z: Vec<T> = normal_vec(&mut stream(seed, Purpose::Renoise, 0), x_t.len());
    let coupled = dps_coupled_step(model, measurement, x_t, sigma_t, sigma_next, eta_t, &z)?;
    let decomposed = dps_decomposed_step(model, measurement, x_t, sigma_t, sigma_next, eta_t, &z)?;
    let diff = max_abs_diff(&coupled, &decomposed);
    let scale = coupled.iter().fold(T::one(), |m, v| m.max(v.abs()));
    Ok(EquivalenceCheck {
        coupled,
        decomposed,
        max_abs_diff: diff,
        relative_diff: diff / scale,
    })
}

/// Coupled baseline: the one-line update at every level, with `η_t` taken
/// from the step-size schedule and no noise after the last level.
pub fn run_dps_baseline<T: Real, M: ScoreModel<T> + ?Sized>(
    model: &M,
    measurement: &Measurement<T>,
    cfg: &SamplerConfig<T>,
) -> Result<SamplerOutput<T>> {
    cfg.validate()?;
    check_len("sampler", model.dim(), measurement.operator.input_len())?;
    let sigmas = cfg.schedule.sigmas();
    let k_total = sigmas.len() - 1;
    let mut x = initial_state(model, cfg.schedule.sigma_max, cfg.seed);
    let mut trace = Trace::default();
    for k in 1..=k_total {
        let sigma = sigmas[k - 1];
        let eta = cfg.step_sizes.for_cycle(k, k_total);
        let last = k == k_total;
        let sigma_next = if last { T::zero() } else { sigmas[k] };
        let z: Vec<T> = normal_vec(&mut stream(cfg.seed, Purpose::Renoise, k as u64), x.len());
        x = dps_coupled_step(model, measurement, &x, sigma, sigma_next, eta, &z)?;
        ensure_finite(&x, k, "coupled update")?;
        trace.total_nfe += 1;
        let r = residual(measurement.operator.as_ref(), &x, &measurement.y)?;
        trace.cycles.push(CycleRecord {
            cycle: k,
            sigma,
            sigma_next: (!last).then_some(sigma_next),
            branch: EStepBranch::Tweedie,
            eta,
            nfe: trace.total_nfe,
            residual_norm: norm(&r),
            kappa: None,
            inner_product: None,
            score_norm_x0: None,
        });
    }
    Ok(SamplerOutput { x, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::IsotropicGaussianPrior;

    #[test]
    fn estep_branches_and_counts() {
        let m = IsotropicGaussianPrior::new(vec![0.0], 1.0).unwrap();
        let hi = estep(&m, &[3.0], 100.0, 0.5, 1, OdeMethod::Rk4).unwrap();
        assert_eq!((hi.branch, hi.nfe), (EStepBranch::Tweedie, 1));
        let lo = estep(&m, &[0.3], 0.3, 0.5, 1, OdeMethod::Rk4).unwrap();
        assert_eq!((lo.branch, lo.nfe), (EStepBranch::Ode, 4));
        assert!(estep(&m, &[0.3], 0.0, 0.5, 1, OdeMethod::Rk4).is_err());
    }

    #[test]
    fn renoise_with_zero_noise_is_identity() {
        assert_eq!(renoise_with(&[1.0, 2.0], 0.7, &[0.0, 0.0]), vec![1.0, 2.0]);
    }
}
