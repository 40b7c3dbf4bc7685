use crate::error::{check_len, invalid, Result};
use crate::linalg::Mat;
use crate::scalar::Real;

use super::{ForwardOperator, ImageShape};

#[derive(Clone, Debug)]
pub struct Identity {
    shape: ImageShape,
}

impl Identity {
    pub fn new(shape: ImageShape) -> Self {
        Self { shape }
    }
}

impl<T: Real> ForwardOperator<T> for Identity {
    fn name(&self) -> &'static str {
        "identity"
    }
    fn input_shape(&self) -> ImageShape {
        self.shape
    }
    fn output_len(&self) -> usize {
        self.shape.len()
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        check_len("identity input", self.shape.len(), x.len())?;
        Ok(x.to_vec())
    }
    fn vjp(&self, x: &[T], r: &[T]) -> Result<Vec<T>> {
        check_len("identity input", self.shape.len(), x.len())?;
        check_len("identity cotangent", self.shape.len(), r.len())?;
        Ok(r.to_vec())
    }
}

/// Arbitrary `m × d` matrix acting on the flattened input.
#[derive(Clone, Debug)]
pub struct DenseLinear<T> {
    shape: ImageShape,
    matrix: Mat<T>,
}

impl<T: Real> DenseLinear<T> {
    pub fn new(shape: ImageShape, matrix: Mat<T>) -> Result<Self> {
        check_len("dense operator columns", shape.len(), matrix.cols())?;
        if matrix.rows() == 0 {
            return Err(invalid("matrix", "need at least one row"));
        }
        Ok(Self { shape, matrix })
    }

    pub fn matrix(&self) -> &Mat<T> {
        &self.matrix
    }
}

impl<T: Real> ForwardOperator<T> for DenseLinear<T> {
    fn name(&self) -> &'static str {
        "dense"
    }
    fn input_shape(&self) -> ImageShape {
        self.shape
    }
    fn output_len(&self) -> usize {
        self.matrix.rows()
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        check_len("dense input", self.shape.len(), x.len())?;
        Ok(self.matrix.matvec(x))
    }
    fn vjp(&self, x: &[T], r: &[T]) -> Result<Vec<T>> {
        check_len("dense input", self.shape.len(), x.len())?;
        check_len("dense cotangent", self.matrix.rows(), r.len())?;
        Ok(self.matrix.tmatvec(r))
    }
}

/// Keeps the pixels where the mask is set, in row-major order.
#[derive(Clone, Debug)]
pub struct MaskInpaint {
    shape: ImageShape,
    mask: Vec<bool>,
    observed: Vec<usize>,
}

impl MaskInpaint {
    pub fn new(shape: ImageShape, mask: Vec<bool>) -> Result<Self> {
        check_len("mask", shape.len(), mask.len())?;
        let observed: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        if observed.is_empty() {
            return Err(invalid("mask", "mask must keep at least one pixel"));
        }
        Ok(Self {
            shape,
            mask,
            observed,
        })
    }

    /// Mask with a centered `box_h × box_w` hole.
    pub fn centered_box(shape: ImageShape, box_h: usize, box_w: usize) -> Result<Self> {
        if box_h > shape.height || box_w > shape.width {
            return Err(invalid("box", "hole larger than the image"));
        }
        let top = (shape.height - box_h) / 2;
        let left = (shape.width - box_w) / 2;
        let mask = (0..shape.len())
            .map(|i| {
                let (r, c) = (i / shape.width, i % shape.width);
                !(r >= top && r < top + box_h && c >= left && c < left + box_w)
            })
            .collect();
        Self::new(shape, mask)
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
}

impl<T: Real> ForwardOperator<T> for MaskInpaint {
    fn name(&self) -> &'static str {
        "mask_inpaint"
    }
    fn input_shape(&self) -> ImageShape {
        self.shape
    }
    fn output_len(&self) -> usize {
        self.observed.len()
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        check_len("mask input", self.shape.len(), x.len())?;
        Ok(self.observed.iter().map(|&i| x[i]).collect())
    }
    fn vjp(&self, x: &[T], r: &[T]) -> Result<Vec<T>> {
        check_len("mask input", self.shape.len(), x.len())?;
        check_len("mask cotangent", self.observed.len(), r.len())?;
        let mut out = vec![T::zero(); self.shape.len()];
        for (&i, &v) in self.observed.iter().zip(r) {
            out[i] = v;
        }
        Ok(out)
    }
}

/// Circular 2-D cross-correlation with a `kh × kw` kernel anchored at its
/// center `(kh/2, kw/2)`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    shape: ImageShape,
    kernel: Mat<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(shape: ImageShape, kernel: Mat<T>) -> Result<Self> {
        if kernel.rows() == 0 || kernel.cols() == 0 {
            return Err(invalid("kernel", "kernel must be nonempty"));
        }
        if kernel.rows() > shape.height || kernel.cols() > shape.width {
            return Err(invalid("kernel", "kernel larger than the image"));
        }
        if kernel.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(invalid("kernel", "kernel entries must be finite"));
        }
        Ok(Self { shape, kernel })
    }

    /// Normalized `size × size` Gaussian kernel with standard deviation `std`.
    pub fn gaussian(shape: ImageShape, size: usize, std: T) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(invalid("size", "gaussian kernel side must be odd"));
        }
        if !(std > T::zero()) {
            return Err(invalid("std", "gaussian kernel width must be positive"));
        }
        let c = T::of_usize(size / 2);
        let two_var = T::of(2.0) * std * std;
        let mut k = Mat::zeros(size, size);
        let mut total = T::zero();
        for i in 0..size {
            for j in 0..size {
                let (di, dj) = (T::of_usize(i) - c, T::of_usize(j) - c);
                let v = (-(di * di + dj * dj) / two_var).exp();
                k[(i, j)] = v;
                total = total + v;
            }
        }
        Self::new(shape, k.scaled(total.recip()))
    }

    /// Horizontal box kernel of `taps` equal weights.
    pub fn motion(shape: ImageShape, taps: usize) -> Result<Self> {
        if taps == 0 {
            return Err(invalid("taps", "motion kernel needs at least one tap"));
        }
        let w = T::of_usize(taps).recip();
        Self::new(shape, Mat::from_row_major(1, taps, vec![w; taps])?)
    }

    /// 1-D circular kernel along a line signal.
    pub fn line(width: usize, taps: Vec<T>) -> Result<Self> {
        let n = taps.len();
        Self::new(ImageShape::line(width), Mat::from_row_major(1, n, taps)?)
    }

    pub fn kernel(&self) -> &Mat<T> {
        &self.kernel
    }
}

impl<T: Real> ForwardOperator<T> for Conv2d<T> {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn input_shape(&self) -> ImageShape {
        self.shape
    }
    fn output_len(&self) -> usize {
        self.shape.len()
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        check_len("conv input", self.shape.len(), x.len())?;
        let (h, w) = (self.shape.height, self.shape.width);
        let (kh, kw) = (self.kernel.rows(), self.kernel.cols());
        let (ch, cw) = (kh / 2, kw / 2);
        let mut out = vec![T::zero(); h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = T::zero();
                for a in 0..kh {
                    let r = (i + h + a - ch) % h;
                    let row = &x[r * w..(r + 1) * w];
                    for b in 0..kw {
                        acc = acc + self.kernel[(a, b)] * row[(j + w + b - cw) % w];
                    }
                }
                out[i * w + j] = acc;
            }
        }
        Ok(out)
    }
    fn vjp(&self, x: &[T], r: &[T]) -> Result<Vec<T>> {
        check_len("conv input", self.shape.len(), x.len())?;
        check_len("conv cotangent", self.shape.len(), r.len())?;
        let (h, w) = (self.shape.height, self.shape.width);
        let (kh, kw) = (self.kernel.rows(), self.kernel.cols());
        let (ch, cw) = (kh / 2, kw / 2);
        let mut out = vec![T::zero(); h * w];
        for i in 0..h {
            for j in 0..w {
                let v = r[i * w + j];
                for a in 0..kh {
                    let p = (i + h + a - ch) % h;
                    for b in 0..kw {
                        let q = (j + w + b - cw) % w;
                        out[p * w + q] = out[p * w + q] + self.kernel[(a, b)] * v;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Non-overlapping `fh × fw` block average.
#[derive(Clone, Debug)]
pub struct DownsampleAvg {
    shape: ImageShape,
    fh: usize,
    fw: usize,
}

impl DownsampleAvg {
    pub fn new(shape: ImageShape, fh: usize, fw: usize) -> Result<Self> {
        if fh == 0 || fw == 0 {
            return Err(invalid("factor", "downsampling factor must be positive"));
        }
        if shape.height % fh != 0 || shape.width % fw != 0 {
            return Err(invalid("factor", "image side must be divisible by the factor"));
        }
        Ok(Self { shape, fh, fw })
    }

    /// Square `factor × factor` pooling on a 2-D image.
    pub fn square(shape: ImageShape, factor: usize) -> Result<Self> {
        Self::new(shape, factor, factor)
    }

    fn out_shape(&self) -> ImageShape {
        ImageShape::new(self.shape.height / self.fh, self.shape.width / self.fw)
    }
}

impl<T: Real> ForwardOperator<T> for DownsampleAvg {
    fn name(&self) -> &'static str {
        "downsample_avg"
    }
    fn input_shape(&self) -> ImageShape {
        self.shape
    }
    fn output_len(&self) -> usize {
        self.out_shape().len()
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        check_len("downsample input", self.shape.len(), x.len())?;
        let o = self.out_shape();
        let w = self.shape.width;
        let inv = T::of_usize(self.fh * self.fw).recip();
        let mut out = vec![T::zero(); o.len()];
        for i in 0..self.shape.height {
            for j in 0..w {
                let k = (i / self.fh) * o.width + j / self.fw;
                out[k] = out[k] + x[i * w + j];
            }
        }
        Ok(out.into_iter().map(|v| v * inv).collect())
    }
    fn vjp(&self, x: &[T], r: &[T]) -> Result<Vec<T>> {
        check_len("downsample input", self.shape.len(), x.len())?;
        let o = self.out_shape();
        check_len("downsample cotangent", o.len(), r.len())?;
        let w = self.shape.width;
        let inv = T::of_usize(self.fh * self.fw).recip();
        Ok((0..self.shape.len())
            .map(|p| {
                let (i, j) = (p / w, p % w);
                r[(i / self.fh) * o.width + j / self.fw] * inv
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;
    use crate::rng::{normal_vec, stream, Purpose};

    #[test]
    fn mask_selects_observed_entries() {
        let op = MaskInpaint::new(ImageShape::line(3), vec![true, false, true]).unwrap();
        assert_eq!(op.apply(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 3.0]);
        assert_eq!(op.vjp(&[0.0; 3], &[4.0, 5.0]).unwrap(), vec![4.0, 0.0, 5.0]);
        assert!(MaskInpaint::new(ImageShape::line(2), vec![false, false]).is_err());
    }

    #[test]
    fn downsample_block_means() {
        let op = DownsampleAvg::new(ImageShape::line(4), 1, 2).unwrap();
        assert_eq!(ForwardOperator::<f64>::apply(&op, &[1.0, 3.0, 5.0, 7.0]).unwrap(), vec![2.0, 6.0]);
        let op2 = DownsampleAvg::square(ImageShape::new(2, 2), 2).unwrap();
        assert_eq!(ForwardOperator::<f64>::apply(&op2, &[1.0, 2.0, 3.0, 6.0]).unwrap(), vec![3.0]);
        assert!(DownsampleAvg::square(ImageShape::new(3, 4), 2).is_err());
    }

    #[test]
    fn circular_line_convolution_by_hand() {
        let op = Conv2d::line(2, vec![0.5, 0.5]).unwrap();
        assert_eq!(op.apply(&[1.0, 3.0]).unwrap(), vec![2.0, 2.0]);
        let op = Conv2d::line(4, vec![1.0, 2.0, 3.0]).unwrap();
        // y_i = x_{i-1} + 2 x_i + 3 x_{i+1}
        assert_eq!(op.apply(&[1.0, 0.0, 0.0, 0.0]).unwrap(), vec![2.0, 1.0, 0.0, 3.0]);
    }

    #[test]
    fn gaussian_kernel_is_normalized_and_symmetric() {
        let op = Conv2d::<f64>::gaussian(ImageShape::new(8, 8), 7, 1.5).unwrap();
        let k = op.kernel();
        let total: f64 = k.as_slice().iter().sum();
        assert!((total - 1.0).abs() < 1e-14);
        assert!((k[(0, 1)] - k[(1, 0)]).abs() < 1e-18);
        assert!((k[(0, 0)] - k[(6, 6)]).abs() < 1e-18);
        assert!(Conv2d::<f64>::gaussian(ImageShape::new(8, 8), 4, 1.5).is_err());
    }

    #[test]
    fn adjoint_identity_for_each_linear_operator() {
        let shape = ImageShape::new(8, 8);
        let ops: Vec<Box<dyn ForwardOperator<f64>>> = vec![
            Box::new(Identity::new(shape)),
            Box::new(MaskInpaint::centered_box(shape, 3, 4).unwrap()),
            Box::new(Conv2d::gaussian(shape, 5, 1.0).unwrap()),
            Box::new(Conv2d::motion(shape, 5).unwrap()),
            Box::new(DownsampleAvg::square(shape, 2).unwrap()),
        ];
        let mut rng = stream(1, Purpose::Probe, 0);
        for op in &ops {
            for _ in 0..10 {
                let x: Vec<f64> = normal_vec(&mut rng, op.input_len());
                let r: Vec<f64> = normal_vec(&mut rng, op.output_len());
                let lhs = dot(&op.apply(&x).unwrap(), &r);
                let rhs = dot(&x, &op.vjp(&x, &r).unwrap());
                assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{}", op.name());
            }
        }
    }
}
