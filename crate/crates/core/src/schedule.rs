//! Annealed noise levels and M-step step sizes.

use crate::error::{invalid, Result};
use crate::scalar::Real;

/// Polynomially warped noise schedule from `sigma_max` down to `sigma_min`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule<T> {
    pub sigma_max: T,
    pub sigma_min: T,
    pub n_steps: usize,
    pub rho: T,
}

impl<T: Real> NoiseSchedule<T> {
    pub fn new(sigma_max: T, sigma_min: T, n_steps: usize, rho: T) -> Result<Self> {
        let s = Self {
            sigma_max,
            sigma_min,
            n_steps,
            rho,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho.is_finite() && self.rho != T::zero()) {
            return Err(invalid("rho", "warp exponent must be finite and nonzero"));
        }
        if !(self.sigma_min > T::zero() && self.sigma_min.is_finite()) {
            return Err(invalid("sigma_min", "must be positive"));
        }
        if !(self.sigma_max > self.sigma_min && self.sigma_max.is_finite()) {
            return Err(invalid("sigma_max", "must exceed sigma_min"));
        }
        if self.n_steps < 2 {
            return Err(invalid("n_steps", "need at least two schedule points"));
        }
        Ok(())
    }

    pub fn sigmas(&self) -> Vec<T> {
        // validated at construction; fields are public so re-check here
        build_schedule(self.sigma_max, self.sigma_min, self.n_steps, self.rho)
            .expect("noise schedule parameters were validated")
    }
}

/// `σ_i = (σ_max^{1/ρ} + i/(N−1)·(σ_min^{1/ρ} − σ_max^{1/ρ}))^ρ` for `i = 0..N`.
///
/// Negative `rho` spends more of the grid at small noise levels; positive `rho`
/// lingers at high noise. Endpoints are pinned exactly.
pub fn build_schedule<T: Real>(sigma_max: T, sigma_min: T, n_steps: usize, rho: T) -> Result<Vec<T>> {
    NoiseSchedule {
        sigma_max,
        sigma_min,
        n_steps,
        rho,
    }
    .validate()?;
    let inv = rho.recip();
    let a = sigma_max.powf(inv);
    let b = sigma_min.powf(inv);
    let last = n_steps - 1;
    let denom = T::of_usize(last);
    let mut out: Vec<T> = (0..n_steps)
        .map(|i| (a + T::of_usize(i) / denom * (b - a)).powf(rho))
        .collect();
    out[0] = sigma_max;
    out[last] = sigma_min;
    Ok(out)
}

/// Linearly decaying ULA step size, `η(t) = η₀·[δ + (t/T)(1−δ)]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSizeSchedule<T> {
    pub eta0: T,
    pub delta: T,
}

impl<T: Real> StepSizeSchedule<T> {
    pub fn new(eta0: T, delta: T) -> Result<Self> {
        let s = Self { eta0, delta };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > T::zero() && self.eta0.is_finite()) {
            return Err(invalid("eta0", "base step size must be positive"));
        }
        if !(self.delta > T::zero() && self.delta <= T::one()) {
            return Err(invalid("delta", "decay ratio must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Step size for annealing cycle `k` of `k_total` (1-based); the first
    /// cycle sits near `eta0` and the last one at `eta0·delta`.
    pub fn for_cycle(&self, k: usize, k_total: usize) -> T {
        let t = T::of_usize(k_total - k);
        step_size(self, t, T::of_usize(k_total)).expect("cycle index lies in [1, K]")
    }
}

pub fn step_size<T: Real>(sched: &StepSizeSchedule<T>, t: T, t_max: T) -> Result<T> {
    if !(t_max > T::zero()) {
        return Err(invalid("T", "horizon must be positive"));
    }
    if !(t >= T::zero() && t <= t_max) {
        return Err(invalid("t", format!("must lie in [0, {t_max}], got {t}")));
    }
    Ok(sched.eta0 * (sched.delta + t / t_max * (T::one() - sched.delta)))
}

/// Tweedie/ODE switch level, `σ̄ = multiplier·γ`.
pub fn sigma_threshold<T: Real>(gamma: T, multiplier: T) -> Result<T> {
    if !(gamma > T::zero()) {
        return Err(invalid("gamma", "must be positive"));
    }
    if !(multiplier > T::zero()) {
        return Err(invalid("multiplier", "must be positive"));
    }
    Ok(multiplier * gamma)
}

pub const DEFAULT_THRESHOLD_MULTIPLIER: f64 = 10.0;
