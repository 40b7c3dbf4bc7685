//! Probability-flow ODE `dx/dσ = −σ·∇ log p_σ(x)`, integrated toward σ = 0.
//!
//! Steps are taken in decreasing σ, so a step of size `h > 0` moves the state
//! from `σ` to `σ − h` and updates `x ← x − h·(dx/dσ)`.

use std::str::FromStr;

use crate::error::{check_len, invalid, Error, Result};
use crate::prior::ScoreModel;
use crate::scalar::Real;

/// Smallest noise level the integrator steps to in place of σ = 0.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct OdeState<T> {
    pub x: Vec<T>,
    pub sigma: T,
}

impl<T: Real> OdeState<T> {
    pub fn new(x: Vec<T>, sigma: T) -> Result<Self> {
        if !(sigma >= T::zero()) {
            return Err(invalid("sigma", "ODE state noise level must be nonnegative"));
        }
        Ok(Self { x, sigma })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OdeMethod {
    Euler,
    Rk4,
}

impl OdeMethod {
    pub fn evals_per_step(self) -> usize {
        match self {
            OdeMethod::Euler => 1,
            OdeMethod::Rk4 => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OdeMethod::Euler => "euler",
            OdeMethod::Rk4 => "rk4",
        }
    }
}

impl FromStr for OdeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(OdeMethod::Euler),
            "rk4" => Ok(OdeMethod::Rk4),
            other => Err(invalid("method", format!("unknown ODE method {other:?}"))),
        }
    }
}

/// `dx/dσ = −σ·score(x, σ)`.
pub fn drift<T: Real, M: ScoreModel<T> + ?Sized>(model: &M, x: &[T], sigma: T) -> Result<Vec<T>> {
    if !(sigma > T::zero()) {
        return Err(invalid("sigma", "drift needs a positive noise level"));
    }
    check_len("drift", model.dim(), x.len())?;
    Ok(model.score(x, sigma)?.into_iter().map(|s| -sigma * s).collect())
}

fn check_step<T: Real>(state: &OdeState<T>, h: T) -> Result<()> {
    if !(h > T::zero() && h.is_finite()) {
        return Err(invalid("h", "step size must be positive"));
    }
    // a relative slack keeps grids that land on σ = 0 up to rounding legal
    if state.sigma - h < -(T::epsilon() * T::of(16.0) * state.sigma.max(T::one())) {
        return Err(invalid("h", format!("step {h} overshoots sigma = 0 from {}", state.sigma)));
    }
    Ok(())
}

fn shifted<T: Real>(x: &[T], k: &[T], c: T) -> Vec<T> {
    x.iter().zip(k).map(|(&a, &b)| a - c * b).collect()
}

fn next_sigma<T: Real>(sigma: T, h: T) -> T {
    (sigma - h).max(T::zero())
}

/// One Euler step with an arbitrary drift `f(x, σ)`.
pub fn euler_step_with<T: Real, F>(mut f: F, state: &OdeState<T>, h: T) -> Result<OdeState<T>>
where
    F: FnMut(&[T], T) -> Result<Vec<T>>,
{
    check_step(state, h)?;
    let k = f(&state.x, state.sigma)?;
    Ok(OdeState {
        x: shifted(&state.x, &k, h),
        sigma: next_sigma(state.sigma, h),
    })
}

/// One classical RK4 step with an arbitrary drift `f(x, σ)`.
pub fn rk4_step_with<T: Real, F>(mut f: F, state: &OdeState<T>, h: T) -> Result<OdeState<T>>
where
    F: FnMut(&[T], T) -> Result<Vec<T>>,
{
    check_step(state, h)?;
    let half = h / T::of(2.0);
    let (x, s) = (&state.x, state.sigma);
    let k1 = f(x, s)?;
    let k2 = f(&shifted(x, &k1, half), s - half)?;
    let k3 = f(&shifted(x, &k2, half), s - half)?;
    let k4 = f(&shifted(x, &k3, h), s - h)?;
    let c = h / T::of(6.0);
    let two = T::of(2.0);
    let x_next = (0..x.len())
        .map(|i| x[i] - c * (k1[i] + two * k2[i] + two * k3[i] + k4[i]))
        .collect();
    Ok(OdeState {
        x: x_next,
        sigma: next_sigma(s, h),
    })
}

/// One score evaluation.
pub fn euler_step<T: Real, M: ScoreModel<T> + ?Sized>(model: &M, state: &OdeState<T>, h: T) -> Result<OdeState<T>> {
    euler_step_with(|x, s| drift(model, x, s), state, h)
}

/// Four score evaluations; the last stage sits at `σ − h`, which must stay positive.
pub fn rk4_step<T: Real, M: ScoreModel<T> + ?Sized>(model: &M, state: &OdeState<T>, h: T) -> Result<OdeState<T>> {
    rk4_step_with(|x, s| drift(model, x, s), state, h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdeSolution<T> {
    pub x: Vec<T>,
    pub nfe: usize,
}

/// Integrates from `sigma_start` to `max(sigma_end, SIGMA_FLOOR)` on a uniform σ grid.
pub fn integrate_pf_ode<T: Real, M: ScoreModel<T> + ?Sized>(
    model: &M,
    x_start: &[T],
    sigma_start: T,
    sigma_end: T,
    n_steps: usize,
    method: OdeMethod,
) -> Result<OdeSolution<T>> {
    check_len("integrate_pf_ode", model.dim(), x_start.len())?;
    if n_steps == 0 {
        return Err(invalid("n_steps", "need at least one ODE step"));
    }
    let end = sigma_end.max(T::of(SIGMA_FLOOR));
    if !(sigma_start > end && sigma_start.is_finite()) {
        return Err(invalid(
            "sigma_start",
            format!("must exceed the end level {end}, got {sigma_start}"),
        ));
    }
    let h = (sigma_start - end) / T::of_usize(n_steps);
    let mut state = OdeState {
        x: x_start.to_vec(),
        sigma: sigma_start,
    };
    for i in 0..n_steps {
        state = match method {
            OdeMethod::Euler => euler_step(model, &state, h)?,
            OdeMethod::Rk4 => rk4_step(model, &state, h)?,
        };
        // pin the grid to avoid accumulated drift in σ
        state.sigma = sigma_start - T::of_usize(i + 1) * h;
    }
    Ok(OdeSolution {
        x: state.x,
        nfe: n_steps * method.evals_per_step(),
    })
}
