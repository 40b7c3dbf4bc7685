//! Likelihood-driven M-step: unadjusted Langevin refinement of the E-step output.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::norm;
use crate::odesolve::{integrate_pf_ode, OdeMethod, SIGMA_FLOOR};
use crate::operators::{likelihood_grad_with_residual, GradConvention, Measurement};
use crate::prior::{tweedie_denoise, ScoreModel};
use crate::rng::{normal_vec, standard_normal, stream, Purpose};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineConfig<T> {
    /// Number of ULA iterations `J`.
    pub n_steps: usize,
    pub eta: T,
    /// Adds `score(x, sigma_ref)` to the drift.
    pub with_prior: bool,
    pub grad_convention: GradConvention,
    /// Noise level at which the prior score is evaluated.
    pub sigma_ref: T,
    /// γ used in the gradient; `None` uses the measurement's own γ.
    pub likelihood_gamma: Option<T>,
}

impl<T: Real> RefineConfig<T> {
    pub fn likelihood_only(n_steps: usize, eta: T) -> Self {
        Self {
            n_steps,
            eta,
            with_prior: false,
            grad_convention: GradConvention::Literal,
            sigma_ref: T::of(0.1),
            likelihood_gamma: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > T::zero() && self.eta.is_finite()) {
            return Err(invalid("eta", "ULA step size must be positive"));
        }
        if self.with_prior && !(self.sigma_ref > T::zero()) {
            return Err(invalid("sigma_ref", "prior noise level must be positive"));
        }
        if let Some(g) = self.likelihood_gamma {
            if !(g > T::zero() && g.is_finite()) {
                return Err(invalid("likelihood_gamma", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn with_eta(self, eta: T) -> Self {
        Self { eta, ..self }
    }
}

/// `x' = x + η·grad + √(2η)·ξ` with `ξ` supplied.
pub fn ula_step_with_noise<T: Real>(x: &[T], grad: &[T], eta: T, xi: &[T]) -> Vec<T> {
    let c = (T::of(2.0) * eta).sqrt();
    (0..x.len()).map(|i| x[i] + eta * grad[i] + c * xi[i]).collect()
}

/// `x' = x + η·grad + √(2η)·ξ`, `ξ ~ N(0, I)`.
pub fn ula_step<T: Real, R: Rng + ?Sized>(x: &[T], grad: &[T], eta: T, rng: &mut R) -> Result<Vec<T>> {
    check_len("ula_step", x.len(), grad.len())?;
    if !(eta > T::zero()) {
        return Err(invalid("eta", "ULA step size must be positive"));
    }
    let c = (T::of(2.0) * eta).sqrt();
    Ok(x.iter()
        .zip(grad)
        .map(|(&a, &g)| a + eta * g + c * standard_normal::<T, _>(rng))
        .collect())
}

/// State of the chain before step `step`; the last row is the returned state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineStep<T> {
    pub step: usize,
    pub residual_norm: T,
    pub grad_norm: T,
}

#[derive(Clone, Debug)]
pub struct RefineOutput<T> {
    pub x: Vec<T>,
    /// `J + 1` rows, for the iterates `x_0 … x_J`.
    pub trace: Vec<RefineStep<T>>,
    pub prior_evals: usize,
}

impl<T: Real> RefineOutput<T> {
    pub fn final_residual_norm(&self) -> T {
        self.trace.last().map(|r| r.residual_norm).unwrap_or(T::nan())
    }
}

/// Runs `J` ULA iterations on the likelihood, optionally with the prior score.
pub fn mcmc_refine<T: Real, M: ScoreModel<T> + ?Sized, R: Rng + ?Sized>(
    x0_hat: &[T],
    measurement: &Measurement<T>,
    model: &M,
    cfg: &RefineConfig<T>,
    rng: &mut R,
) -> Result<RefineOutput<T>> {
    cfg.validate()?;
    let op = measurement.operator.as_ref();
    check_len("mcmc_refine", op.input_len(), x0_hat.len())?;
    let gamma = cfg.likelihood_gamma.unwrap_or(measurement.gamma);
    let mut x = x0_hat.to_vec();
    let mut trace = Vec::with_capacity(cfg.n_steps + 1);
    let mut prior_evals = 0;
    for step in 0..=cfg.n_steps {
        let (mut g, r) = likelihood_grad_with_residual(op, &x, &measurement.y, gamma, cfg.grad_convention)?;
        trace.push(RefineStep {
            step,
            residual_norm: norm(&r),
            grad_norm: norm(&g),
        });
        if step == cfg.n_steps {
            break;
        }
        if cfg.with_prior {
            let s = model.score(&x, cfg.sigma_ref)?;
            prior_evals += 1;
            for (gi, si) in g.iter_mut().zip(s) {
                *gi = *gi + si;
            }
        }
        let xi: Vec<T> = normal_vec(rng, x.len());
        x = ula_step_with_noise(&x, &g, cfg.eta, &xi);
    }
    Ok(RefineOutput { x, trace, prior_evals })
}

/// `J·η·ε·exp(J·η·L)` with `L = ‖A‖²/γ²`: how far `J` steps with and without
/// the prior can drift apart when `‖score‖ ≤ ε` along the way.
pub fn prior_negligibility_bound<T: Real>(n_steps: usize, eta: T, score_bound: T, gamma: T, op_norm: T) -> T {
    let j = T::of_usize(n_steps);
    let lip = op_norm * op_norm / (gamma * gamma);
    j * eta * score_bound * (j * eta * lip).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WarmStart {
    Tweedie,
    /// Five Euler steps of the probability-flow ODE.
    Euler5,
    /// Five RK4 steps of the probability-flow ODE.
    Rk45,
    /// Standard normal draw, ignoring `x_t`.
    PureNoise,
}

impl WarmStart {
    pub const ALL: [WarmStart; 4] = [WarmStart::Tweedie, WarmStart::Euler5, WarmStart::Rk45, WarmStart::PureNoise];

    pub fn as_str(self) -> &'static str {
        match self {
            WarmStart::Tweedie => "tweedie",
            WarmStart::Euler5 => "euler5",
            WarmStart::Rk45 => "rk45",
            WarmStart::PureNoise => "pure_noise",
        }
    }

    /// Initial state for refinement from the noisy `x_t` at level `sigma_t`.
    pub fn initialize<T: Real, M: ScoreModel<T> + ?Sized>(
        self,
        model: &M,
        x_t: &[T],
        sigma_t: T,
        seed: u64,
    ) -> Result<Vec<T>> {
        let floor = T::of(SIGMA_FLOOR);
        match self {
            WarmStart::Tweedie => tweedie_denoise(model, x_t, sigma_t),
            WarmStart::Euler5 => Ok(integrate_pf_ode(model, x_t, sigma_t, floor, 5, OdeMethod::Euler)?.x),
            WarmStart::Rk45 => Ok(integrate_pf_ode(model, x_t, sigma_t, floor, 5, OdeMethod::Rk4)?.x),
            WarmStart::PureNoise => Ok(normal_vec(&mut stream(seed, Purpose::WarmStart, 0), x_t.len())),
        }
    }
}

impl fmt::Display for WarmStart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WarmStart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WarmStart::ALL
            .into_iter()
            .find(|w| w.as_str() == s)
            .ok_or_else(|| invalid("init", format!("unknown initializer {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarmStartRow<T> {
    pub init: WarmStart,
    /// First iterate index whose residual is at or below the threshold.
    pub iterations_to_threshold: Option<usize>,
    pub initial_residual: T,
    pub final_residual: T,
}

/// Residual level `1.5·γ√m` used by [`warm_start_compare`].
pub fn warm_start_threshold<T: Real>(measurement: &Measurement<T>) -> T {
    T::of(1.5) * measurement.gamma * T::of_usize(measurement.y.len()).sqrt()
}

/// Runs the same refinement (same noise stream) from each initializer.
pub fn warm_start_compare<T: Real, M: ScoreModel<T> + ?Sized>(
    measurement: &Measurement<T>,
    model: &M,
    x_t: &[T],
    sigma_t: T,
    inits: &[WarmStart],
    cfg: &RefineConfig<T>,
    seed: u64,
) -> Result<Vec<WarmStartRow<T>>> {
    let threshold = warm_start_threshold(measurement);
    inits
        .iter()
        .map(|&init| {
            let x0 = init.initialize(model, x_t, sigma_t, seed)?;
            let mut rng = stream(seed, Purpose::Refine, 0);
            let out = mcmc_refine(&x0, measurement, model, cfg, &mut rng)?;
            Ok(WarmStartRow {
                init,
                iterations_to_threshold: out.trace.iter().position(|r| r.residual_norm <= threshold),
                initial_residual: out.trace[0].residual_norm,
                final_residual: out.final_residual_norm(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{Identity, ImageShape};
    use crate::prior::IsotropicGaussianPrior;
    use std::sync::Arc;

    #[test]
    fn deterministic_part_of_ula() {
        assert_eq!(ula_step_with_noise(&[1.0], &[-1.0], 0.1, &[0.0]), vec![0.9]);
        let x = ula_step_with_noise(&[1.0], &[0.0], 0.1, &[0.7]);
        assert!((x[0] - 1.0 - (0.2f64).sqrt() * 0.7).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_return_input() {
        let op = Arc::new(Identity::new(ImageShape::line(2)));
        let m = Measurement::new(vec![1.0, 2.0], 0.1, op).unwrap();
        let prior = IsotropicGaussianPrior::new(vec![0.0; 2], 1.0).unwrap();
        let cfg = RefineConfig::likelihood_only(0, 1e-3);
        let out = mcmc_refine(&[0.5, 0.5], &m, &prior, &cfg, &mut stream(0, Purpose::Refine, 0)).unwrap();
        assert_eq!(out.x, vec![0.5, 0.5]);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn warm_start_names_round_trip() {
        for w in WarmStart::ALL {
            assert_eq!(w.as_str().parse::<WarmStart>().unwrap(), w);
        }
        assert!("dps".parse::<WarmStart>().is_err());
    }
}
