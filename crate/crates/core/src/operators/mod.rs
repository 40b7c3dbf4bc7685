//! Forward measurement operators `y = A(x₀) + n`.
//!
//! Every operator maps a flattened row-major image to a flat measurement
//! vector and provides the vector–Jacobian product used by the M-step.

mod linear;
mod nonlinear;

pub use linear::{Conv2d, DenseLinear, DownsampleAvg, Identity, MaskInpaint};
pub use nonlinear::{HdrClip, PhaseMagnitude};

use std::fmt::Debug;
use std::sync::Arc;

use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::{singular_values, Mat};
use crate::scalar::Real;

/// Height × width of a grayscale image; 1-D signals use `height = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn line(width: usize) -> Self {
        Self { height: 1, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub trait ForwardOperator<T: Real>: Send + Sync + Debug {
    fn name(&self) -> &'static str;

    fn input_shape(&self) -> ImageShape;

    fn output_len(&self) -> usize;

    fn is_linear(&self) -> bool;

    fn apply(&self, x: &[T]) -> Result<Vec<T>>;

    /// `J(x)ᵀ r`. Linear operators ignore `x`.
    fn vjp(&self, x: &[T], r: &[T]) -> Result<Vec<T>>;

    fn input_len(&self) -> usize {
        self.input_shape().len()
    }
}

pub type SharedOperator<T> = Arc<dyn ForwardOperator<T>>;

/// Observation together with its noise level and the operator that produced it.
#[derive(Clone, Debug)]
pub struct Measurement<T: Real> {
    pub y: Vec<T>,
    pub gamma: T,
    pub operator: SharedOperator<T>,
}

impl<T: Real> Measurement<T> {
    pub fn new(y: Vec<T>, gamma: T, operator: SharedOperator<T>) -> Result<Self> {
        check_len("measurement", operator.output_len(), y.len())?;
        if !(gamma > T::zero() && gamma.is_finite()) {
            return Err(invalid("gamma", "measurement noise std must be positive"));
        }
        Ok(Self { y, gamma, operator })
    }

    /// `‖r‖ / (γ√m)`; close to 1 when the fit sits at the noise floor.
    pub fn residual_ratio(&self, x: &[T]) -> Result<T> {
        let r = residual(self.operator.as_ref(), x, &self.y)?;
        let m = T::of_usize(self.y.len());
        Ok(crate::linalg::norm(&r) / (self.gamma * m.sqrt()))
    }
}

pub fn apply<T: Real, A: ForwardOperator<T> + ?Sized>(op: &A, x: &[T]) -> Result<Vec<T>> {
    op.apply(x)
}

pub fn vjp<T: Real, A: ForwardOperator<T> + ?Sized>(op: &A, x: &[T], r: &[T]) -> Result<Vec<T>> {
    op.vjp(x, r)
}

/// `y − A(x)`.
pub fn residual<T: Real, A: ForwardOperator<T> + ?Sized>(op: &A, x: &[T], y: &[T]) -> Result<Vec<T>> {
    check_len("residual", op.output_len(), y.len())?;
    let pred = op.apply(x)?;
    Ok(y.iter().zip(&pred).map(|(&a, &b)| a - b).collect())
}

/// Scaling of the data-consistency gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GradConvention {
    /// `(1/γ²)·∇ₓ(−‖y − A(x)‖²) = (2/γ²)·Jᵀr`, twice the exact score.
    #[default]
    Literal,
    /// `∇ₓ log N(y; A(x), γ²I) = (1/γ²)·Jᵀr`.
    Exact,
}

impl GradConvention {
    pub fn factor<T: Real>(self) -> T {
        match self {
            GradConvention::Literal => T::of(2.0),
            GradConvention::Exact => T::one(),
        }
    }
}

/// Ascent direction of the Gaussian log-likelihood at `x`.
pub fn likelihood_grad<T: Real, A: ForwardOperator<T> + ?Sized>(
    op: &A,
    x: &[T],
    y: &[T],
    gamma: T,
    convention: GradConvention,
) -> Result<Vec<T>> {
    Ok(likelihood_grad_with_residual(op, x, y, gamma, convention)?.0)
}

/// Same as [`likelihood_grad`] but also hands back the residual it computed.
pub fn likelihood_grad_with_residual<T: Real, A: ForwardOperator<T> + ?Sized>(
    op: &A,
    x: &[T],
    y: &[T],
    gamma: T,
    convention: GradConvention,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(gamma > T::zero() && gamma.is_finite()) {
        return Err(invalid("gamma", "likelihood noise std must be positive"));
    }
    let r = residual(op, x, y)?;
    let c = convention.factor::<T>() / (gamma * gamma);
    let g = op.vjp(x, &r)?.into_iter().map(|v| c * v).collect();
    Ok((g, r))
}

/// Dense `m × d` matrix of a linear operator, built column by column.
pub fn densify<T: Real, A: ForwardOperator<T> + ?Sized>(op: &A) -> Result<Mat<T>> {
    if !op.is_linear() {
        return Err(Error::Unsupported(format!("{} is not linear", op.name())));
    }
    let d = op.input_len();
    let m = op.output_len();
    let mut out = Mat::zeros(m, d);
    let mut e = vec![T::zero(); d];
    for j in 0..d {
        e[j] = T::one();
        let col = op.apply(&e)?;
        for (i, v) in col.into_iter().enumerate() {
            out[(i, j)] = v;
        }
        e[j] = T::zero();
    }
    Ok(out)
}

/// Smallest singular value above the rank tolerance `max(m, d)·ε·s_max`.
pub fn min_nonzero_singular<T: Real, A: ForwardOperator<T> + ?Sized>(op: &A) -> Result<T> {
    let a = densify(op)?;
    let s = singular_values(&a);
    let s_max = s.first().copied().unwrap_or(T::zero());
    let tol = T::of_usize(a.rows().max(a.cols())) * T::epsilon() * s_max;
    s.into_iter()
        .filter(|&v| v > tol)
        .last()
        .ok_or_else(|| Error::LinearAlgebra("operator has no nonzero singular value".into()))
}

/// Largest singular value `‖A‖₂` of a linear operator.
pub fn operator_norm<T: Real, A: ForwardOperator<T> + ?Sized>(op: &A) -> Result<T> {
    let a = densify(op)?;
    Ok(singular_values(&a).first().copied().unwrap_or(T::zero()))
}
