//! Small-image Gaussian mixture used by the image presets.
//!
//! Four smooth mean patterns (horizontal ramp, centered bump, checkerboard
//! blocks, horizontal stripes), all inside `[0.2, 0.8]`, share a
//! squared-exponential pixel covariance.

use dapspp_core::operators::ImageShape;
use dapspp_core::{GmmPrior, Mat, Result};

/// `variance·exp(−‖p − q‖²/(2ℓ²)) + nugget·δ_pq` over pixel positions.
pub fn squared_exponential_covariance(shape: ImageShape, variance: f64, length_scale: f64, nugget: f64) -> Mat<f64> {
    let (h, w) = (shape.height, shape.width);
    let d = h * w;
    let mut cov = Mat::zeros(d, d);
    for p in 0..d {
        for q in p..d {
            let di = (p / w) as f64 - (q / w) as f64;
            let dj = (p % w) as f64 - (q % w) as f64;
            let mut v = variance * (-(di * di + dj * dj) / (2.0 * length_scale * length_scale)).exp();
            if p == q {
                v += nugget;
            }
            cov[(p, q)] = v;
            cov[(q, p)] = v;
        }
    }
    cov
}

pub fn mean_patterns(shape: ImageShape) -> Vec<Vec<f64>> {
    let (h, w) = (shape.height, shape.width);
    let d = h * w;
    let (ci, cj) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let block = (h.min(w) / 4).max(1);
    let bump_width = (h.min(w) as f64 / 4.0).max(1.0);
    let ramp = (0..d).map(|p| 0.2 + 0.6 * (p % w) as f64 / (w.max(2) - 1) as f64).collect();
    let bump = (0..d)
        .map(|p| {
            let (i, j) = ((p / w) as f64 - ci, (p % w) as f64 - cj);
            0.2 + 0.6 * (-(i * i + j * j) / (2.0 * bump_width * bump_width)).exp()
        })
        .collect();
    let checker = (0..d)
        .map(|p| if ((p / w) / block + (p % w) / block) % 2 == 0 { 0.7 } else { 0.3 })
        .collect();
    let stripes = (0..d).map(|p| 0.5 + 0.3 * ((p / w) as f64 * 0.8).sin()).collect();
    vec![ramp, bump, checker, stripes]
}

pub fn image_gmm(shape: ImageShape, variance: f64, length_scale: f64, nugget: f64) -> Result<GmmPrior<f64>> {
    let means = mean_patterns(shape);
    let cov = squared_exponential_covariance(shape, variance, length_scale, nugget);
    let k = means.len();
    GmmPrior::new(vec![1.0 / k as f64; k], means, vec![cov; k])
}
