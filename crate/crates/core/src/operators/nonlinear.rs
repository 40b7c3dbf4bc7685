use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{check_len, invalid, Result};
use crate::scalar::Real;

use super::{ForwardOperator, ImageShape};

/// Saturating exposure gain, `y = clip(α·x, −1, 1)`.
///
/// The derivative is taken as 0 on the clipped set, including its boundary.
#[derive(Clone, Debug)]
pub struct HdrClip<T> {
    shape: ImageShape,
    alpha: T,
}

impl<T: Real> HdrClip<T> {
    pub fn new(shape: ImageShape, alpha: T) -> Result<Self> {
        if !(alpha > T::zero() && alpha.is_finite()) {
            return Err(invalid("alpha", "gain must be positive"));
        }
        Ok(Self { shape, alpha })
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }
}

impl<T: Real> ForwardOperator<T> for HdrClip<T> {
    fn name(&self) -> &'static str {
        "hdr_clip"
    }
    fn input_shape(&self) -> ImageShape {
        self.shape
    }
    fn output_len(&self) -> usize {
        self.shape.len()
    }
    fn is_linear(&self) -> bool {
        false
    }
    fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        check_len("hdr input", self.shape.len(), x.len())?;
        Ok(x.iter().map(|&v| (self.alpha * v).max(-T::one()).min(T::one())).collect())
    }
    fn vjp(&self, x: &[T], r: &[T]) -> Result<Vec<T>> {
        check_len("hdr input", self.shape.len(), x.len())?;
        check_len("hdr cotangent", self.shape.len(), r.len())?;
        Ok(x.iter()
            .zip(r)
            .map(|(&v, &g)| if (self.alpha * v).abs() < T::one() { self.alpha * g } else { T::zero() })
            .collect())
    }
}

/// Fourier magnitude of the zero-padded image, `y = |F(P x)|`, with `F` the
/// unitary 2-D DFT and `P` padding to `oversample` times each side
/// (image in the top-left corner).
pub struct PhaseMagnitude<T: Real> {
    shape: ImageShape,
    oversample: usize,
    row_fwd: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> fmt::Debug for PhaseMagnitude<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PhaseMagnitude")
            .field("shape", &self.shape)
            .field("oversample", &self.oversample)
            .finish()
    }
}

impl<T: Real> PhaseMagnitude<T> {
    pub fn new(shape: ImageShape, oversample: usize) -> Result<Self> {
        if oversample == 0 {
            return Err(invalid("oversample", "padding factor must be at least 1"));
        }
        if shape.is_empty() {
            return Err(invalid("shape", "image must be nonempty"));
        }
        let (ph, pw) = (shape.height * oversample, shape.width * oversample);
        let mut planner = FftPlanner::new();
        Ok(Self {
            shape,
            oversample,
            row_fwd: planner.plan_fft_forward(pw),
            col_fwd: planner.plan_fft_forward(ph),
            row_inv: planner.plan_fft_inverse(pw),
            col_inv: planner.plan_fft_inverse(ph),
        })
    }

    fn padded(&self) -> ImageShape {
        ImageShape::new(self.shape.height * self.oversample, self.shape.width * self.oversample)
    }

    /// In-place 2-D transform on a row-major buffer, scaled to be unitary.
    fn transform(&self, buf: &mut [Complex<T>], inverse: bool) {
        let p = self.padded();
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        for chunk in buf.chunks_exact_mut(p.width) {
            row.process(chunk);
        }
        let mut column = vec![Complex::new(T::zero(), T::zero()); p.height];
        for j in 0..p.width {
            for i in 0..p.height {
                column[i] = buf[i * p.width + j];
            }
            col.process(&mut column);
            for i in 0..p.height {
                buf[i * p.width + j] = column[i];
            }
        }
        let s = T::of_usize(p.len()).sqrt().recip();
        for v in buf.iter_mut() {
            *v = *v * s;
        }
    }

    fn spectrum(&self, x: &[T]) -> Vec<Complex<T>> {
        let p = self.padded();
        let mut buf = vec![Complex::new(T::zero(), T::zero()); p.len()];
        for i in 0..self.shape.height {
            for j in 0..self.shape.width {
                buf[i * p.width + j] = Complex::new(x[i * self.shape.width + j], T::zero());
            }
        }
        self.transform(&mut buf, false);
        buf
    }
}

impl<T: Real> ForwardOperator<T> for PhaseMagnitude<T> {
    fn name(&self) -> &'static str {
        "phase_magnitude"
    }
    fn input_shape(&self) -> ImageShape {
        self.shape
    }
    fn output_len(&self) -> usize {
        self.padded().len()
    }
    fn is_linear(&self) -> bool {
        false
    }
    fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        check_len("phase input", self.shape.len(), x.len())?;
        Ok(self.spectrum(x).iter().map(|z| z.norm()).collect())
    }
    fn vjp(&self, x: &[T], r: &[T]) -> Result<Vec<T>> {
        check_len("phase input", self.shape.len(), x.len())?;
        check_len("phase cotangent", self.output_len(), r.len())?;
        let mut buf = self.spectrum(x);
        for (z, &g) in buf.iter_mut().zip(r) {
            let m = z.norm();
            *z = if m > T::zero() { *z * (g / m) } else { Complex::new(T::zero(), T::zero()) };
        }
        self.transform(&mut buf, true);
        let pw = self.padded().width;
        Ok((0..self.shape.len())
            .map(|k| buf[(k / self.shape.width) * pw + k % self.shape.width].re)
            .collect())
    }
}
