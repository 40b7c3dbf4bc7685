//! Gradient-balance measurements, the closed-form mixture posterior, and
//! image-quality metrics.

use rand::Rng;

use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::{dot, norm, Cholesky, Mat};
use crate::operators::{densify, residual, ForwardOperator};
use crate::prior::{log_sum_exp, tweedie_denoise, GmmPrior, ScoreModel};
use crate::rng::normal_vec;
use crate::scalar::Real;

/// Likelihood gradient and prior score at a noisy state.
#[derive(Clone, Debug)]
pub struct GradientPair<T> {
    /// `(1/γ²)·J(x̂₀)ᵀ(y − A(x̂₀))` with `x̂₀` the Tweedie estimate of `x_t`.
    pub likelihood: Vec<T>,
    /// `∇ log p_σ(x_t)`.
    pub prior: Vec<T>,
    pub residual: Vec<T>,
}

pub fn gradient_pair<T: Real, M: ScoreModel<T> + ?Sized, A: ForwardOperator<T> + ?Sized>(
    model: &M,
    op: &A,
    x_t: &[T],
    y: &[T],
    gamma: T,
    sigma_t: T,
) -> Result<GradientPair<T>> {
    if !(gamma > T::zero()) {
        return Err(invalid("gamma", "must be positive"));
    }
    let prior = model.score(x_t, sigma_t)?;
    let s2 = sigma_t * sigma_t;
    let x0: Vec<T> = x_t.iter().zip(&prior).map(|(&x, &s)| x + s2 * s).collect();
    let r = residual(op, &x0, y)?;
    let c = (gamma * gamma).recip();
    let likelihood = op.vjp(&x0, &r)?.into_iter().map(|v| c * v).collect();
    Ok(GradientPair {
        likelihood,
        prior,
        residual: r,
    })
}

/// `A_t = ⟨likelihood gradient, prior score⟩` at `x_t`.
#[allow(non_snake_case)]
pub fn inner_product_At<T: Real, M: ScoreModel<T> + ?Sized, A: ForwardOperator<T> + ?Sized>(
    model: &M,
    op: &A,
    x_t: &[T],
    y: &[T],
    gamma: T,
    sigma_t: T,
) -> Result<T> {
    let g = gradient_pair(model, op, x_t, y, gamma, sigma_t)?;
    Ok(dot(&g.likelihood, &g.prior))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kappa<T> {
    pub value: T,
    /// Set when the prior score vanished and `value` is the `+∞` sentinel.
    pub degenerate: bool,
}

impl<T: Real> Kappa<T> {
    pub fn from_pair(pair: &GradientPair<T>) -> Self {
        Self::from_norms(norm(&pair.likelihood), norm(&pair.prior))
    }

    pub fn from_norms(likelihood_norm: T, prior_norm: T) -> Self {
        if prior_norm > T::zero() {
            Self {
                value: likelihood_norm / prior_norm,
                degenerate: false,
            }
        } else {
            Self {
                value: T::infinity(),
                degenerate: true,
            }
        }
    }
}

/// `κ_t = ‖likelihood gradient‖ / ‖prior score‖` at `x_t`.
pub fn kappa<T: Real, M: ScoreModel<T> + ?Sized, A: ForwardOperator<T> + ?Sized>(
    model: &M,
    op: &A,
    x_t: &[T],
    y: &[T],
    gamma: T,
    sigma_t: T,
) -> Result<Kappa<T>> {
    Ok(Kappa::from_pair(&gradient_pair(model, op, x_t, y, gamma, sigma_t)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KappaBound<T> {
    pub sigma_min_plus: T,
    pub gamma: T,
    pub lipschitz_c: T,
    pub sigma_t: T,
    pub residual_norm: T,
}

/// `σ_min⁺(A)/(γ²·C) · σ_t · ‖r_t‖`.
pub fn kappa_lower_bound<T: Real>(kb: &KappaBound<T>) -> Result<T> {
    let fields = [
        ("sigma_min_plus", kb.sigma_min_plus),
        ("gamma", kb.gamma),
        ("lipschitz_c", kb.lipschitz_c),
        ("sigma_t", kb.sigma_t),
        ("residual_norm", kb.residual_norm),
    ];
    for (name, v) in fields {
        if !(v > T::zero() && v.is_finite()) {
            return Err(invalid(name, format!("must be positive and finite, got {v}")));
        }
    }
    Ok(kb.sigma_min_plus / (kb.gamma * kb.gamma * kb.lipschitz_c) * kb.sigma_t * kb.residual_norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzEstimate<T> {
    /// `max_ratio · σ²`.
    pub c: T,
    /// Largest observed `‖s(x) − s(x')‖ / ‖x − x'‖`.
    pub max_ratio: T,
}

/// Probe-based Lipschitz constant of the score at level `sigma`.
///
/// Each probe draws `x = x₀ + σε` with `x₀` from the clean prior and compares
/// the score there against a nearby point and against an independent draw.
pub fn lipschitz_estimate<T: Real, M: ScoreModel<T> + ?Sized, R: Rng>(
    model: &M,
    sigma: T,
    n_probes: usize,
    rng: &mut R,
) -> Result<LipschitzEstimate<T>> {
    if !(sigma > T::zero()) {
        return Err(invalid("sigma", "must be positive"));
    }
    if n_probes == 0 {
        return Err(invalid("n_probes", "need at least one probe"));
    }
    let d = model.dim();
    let noisy = |rng: &mut R| -> Vec<T> {
        let x0 = model.sample(rng);
        let e: Vec<T> = normal_vec(rng, d);
        x0.iter().zip(e).map(|(&a, b)| a + sigma * b).collect()
    };
    let mut max_ratio = T::zero();
    for _ in 0..n_probes {
        let x = noisy(rng);
        let sx = model.score(&x, sigma)?;
        let step = T::of(0.05) * sigma.min(T::one());
        let e: Vec<T> = normal_vec(rng, d);
        let near: Vec<T> = x.iter().zip(&e).map(|(&a, &b)| a + step * b).collect();
        let far = noisy(rng);
        for other in [near, far] {
            let dx = norm(&crate::linalg::sub(&x, &other));
            if dx > T::zero() {
                let so = model.score(&other, sigma)?;
                let ratio = norm(&crate::linalg::sub(&sx, &so)) / dx;
                max_ratio = max_ratio.max(ratio);
            }
        }
    }
    Ok(LipschitzEstimate {
        c: max_ratio * sigma * sigma,
        max_ratio,
    })
}

/// `max σ·‖score(x, σ)‖` over the given points: the constant `C` with
/// `‖score‖ ≤ C/σ` on that set.
pub fn score_magnitude_constant<T: Real, M: ScoreModel<T> + ?Sized>(
    model: &M,
    sigma: T,
    points: &[Vec<T>],
) -> Result<T> {
    let mut c = T::zero();
    for x in points {
        c = c.max(sigma * norm(&model.score(x, sigma)?));
    }
    Ok(c)
}

/// Exact Gaussian-mixture posterior of a linear-Gaussian inverse problem.
#[derive(Clone, Debug)]
pub struct PosteriorOracle<T> {
    pub weights: Vec<T>,
    pub means: Vec<Vec<T>>,
    pub covariances: Vec<Mat<T>>,
}

/// Conjugate update of every component of `prior` under `y = A x + N(0, γ²I)`.
pub fn gmm_posterior_oracle<T: Real, A: ForwardOperator<T> + ?Sized>(
    prior: &GmmPrior<T>,
    op: &A,
    y: &[T],
    gamma: T,
) -> Result<PosteriorOracle<T>> {
    if !op.is_linear() {
        return Err(Error::Unsupported(format!("posterior oracle needs a linear operator, got {}", op.name())));
    }
    check_len("oracle input", prior.dim(), op.input_len())?;
    let a = densify(op)?;
    mixture_posterior(&prior.weights(), &prior.means(), &prior.covariances(), &a, y, gamma)
}

/// Same update with an explicit dense measurement matrix.
pub fn mixture_posterior<T: Real>(
    weights: &[T],
    means: &[Vec<T>],
    covariances: &[Mat<T>],
    a: &Mat<T>,
    y: &[T],
    gamma: T,
) -> Result<PosteriorOracle<T>> {
    if !(gamma > T::zero()) {
        return Err(invalid("gamma", "must be positive"));
    }
    check_len("oracle measurement", a.rows(), y.len())?;
    let at = a.transpose();
    let g2 = gamma * gamma;
    let mut log_w = Vec::with_capacity(weights.len());
    let mut post_means = Vec::with_capacity(weights.len());
    let mut post_covs = Vec::with_capacity(weights.len());
    for ((&w, mu), cov) in weights.iter().zip(means).zip(covariances) {
        check_len("oracle mean", a.cols(), mu.len())?;
        // S = AΣAᵀ + γ²I, gain K = ΣAᵀS⁻¹
        let sig_at = cov.matmul(&at);
        let s = a.matmul(&sig_at).add_diagonal(g2);
        let chol = Cholesky::new(&s)?;
        let innov: Vec<T> = y.iter().zip(a.matvec(mu)).map(|(&yi, p)| yi - p).collect();
        let alpha = chol.solve(&innov);
        let mean: Vec<T> = mu.iter().zip(sig_at.matvec(&alpha)).map(|(&m, d)| m + d).collect();
        let kt = chol.solve_mat(&sig_at.transpose());
        let mut c = cov.sub(&sig_at.matmul(&kt));
        symmetrize(&mut c);
        let z = chol.forward(&innov);
        let m = T::of_usize(y.len());
        let log_ml =
            -T::of(0.5) * (dot(&z, &z) + chol.log_det() + m * (T::of(2.0) * T::PI()).ln());
        log_w.push(w.ln() + log_ml);
        post_means.push(mean);
        post_covs.push(c);
    }
    let lse = log_sum_exp(&log_w);
    Ok(PosteriorOracle {
        weights: log_w.iter().map(|&l| (l - lse).exp()).collect(),
        means: post_means,
        covariances: post_covs,
    })
}

fn symmetrize<T: Real>(c: &mut Mat<T>) {
    let half = T::of(0.5);
    for i in 0..c.rows() {
        for j in (i + 1)..c.cols() {
            let v = half * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
}

impl<T: Real> PosteriorOracle<T> {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn mean(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, &v) in out.iter_mut().zip(m) {
                *o = *o + *w * v;
            }
        }
        out
    }

    /// Law of total covariance over the components.
    pub fn covariance(&self) -> Mat<T> {
        let d = self.dim();
        let mu = self.mean();
        let mut out = Mat::zeros(d, d);
        for ((&w, m), c) in self.weights.iter().zip(&self.means).zip(&self.covariances) {
            for i in 0..d {
                for j in 0..d {
                    out[(i, j)] = out[(i, j)] + w * (c[(i, j)] + (m[i] - mu[i]) * (m[j] - mu[j]));
                }
            }
        }
        out
    }

    pub fn as_prior(&self) -> Result<GmmPrior<T>> {
        let total: T = self.weights.iter().copied().sum();
        let w = self.weights.iter().map(|&v| v / total).collect();
        GmmPrior::new(w, self.means.clone(), self.covariances.clone())
    }

    pub fn log_density(&self, x: &[T]) -> Result<T> {
        self.as_prior()?.log_density(x, T::zero())
    }

    /// Posterior component probabilities of `x`.
    pub fn responsibilities(&self, x: &[T]) -> Result<Vec<T>> {
        self.as_prior()?.responsibilities(x, T::zero())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentError<T> {
    /// `‖mean(samples) − oracle mean‖`.
    pub mean_err: T,
    /// Per-coordinate `(sample mean − oracle mean) / standard error`.
    pub mean_z: Vec<T>,
    /// Frobenius distance between sample and oracle covariance.
    pub cov_err: T,
    /// `cov_err / ‖oracle covariance‖_F`.
    pub cov_rel_err: T,
    /// Largest absolute component-weight error.
    pub weight_err: T,
    pub sample_weights: Vec<T>,
}

pub fn moment_error<T: Real>(samples: &[Vec<T>], oracle: &PosteriorOracle<T>) -> Result<MomentError<T>> {
    let n = samples.len();
    if n < 2 {
        return Err(invalid("samples", "need at least two samples"));
    }
    let d = oracle.dim();
    for s in samples {
        check_len("moment_error sample", d, s.len())?;
    }
    let nf = T::of_usize(n);
    let mut mean = vec![T::zero(); d];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s) {
            *m = *m + v;
        }
    }
    for m in &mut mean {
        *m = *m / nf;
    }
    let mut cov = Mat::zeros(d, d);
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] = cov[(i, j)] + (s[i] - mean[i]) * (s[j] - mean[j]);
            }
        }
    }
    let cov = cov.scaled((nf - T::one()).recip());
    let omean = oracle.mean();
    let ocov = oracle.covariance();
    let mean_z = (0..d)
        .map(|i| {
            let se = (cov[(i, i)] / nf).sqrt();
            let diff = mean[i] - omean[i];
            if se > T::zero() {
                diff / se
            } else if diff == T::zero() {
                T::zero()
            } else {
                T::infinity()
            }
        })
        .collect();
    let cov_err = cov.sub(&ocov).frobenius();
    let prior = oracle.as_prior()?;
    let mut sample_weights = vec![T::zero(); oracle.weights.len()];
    for s in samples {
        for (w, r) in sample_weights.iter_mut().zip(prior.responsibilities(s, T::zero())?) {
            *w = *w + r;
        }
    }
    for w in &mut sample_weights {
        *w = *w / nf;
    }
    let weight_err = sample_weights
        .iter()
        .zip(&oracle.weights)
        .map(|(&a, &b)| (a - b).abs())
        .fold(T::zero(), T::max);
    Ok(MomentError {
        mean_err: norm(&crate::linalg::sub(&mean, &omean)),
        mean_z,
        cov_rel_err: cov_err / ocov.frobenius(),
        cov_err,
        weight_err,
        sample_weights,
    })
}

pub fn mse<T: Real>(x: &[T], x_ref: &[T]) -> Result<T> {
    check_len("mse", x_ref.len(), x.len())?;
    if x.is_empty() {
        return Err(invalid("x", "empty input"));
    }
    let s: T = x.iter().zip(x_ref).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(s / T::of_usize(x.len()))
}

/// `10·log10(peak²/mse)`; identical inputs give `+∞`.
pub fn psnr<T: Real>(x: &[T], x_ref: &[T], peak: T) -> Result<T> {
    if !(peak > T::zero()) {
        return Err(invalid("peak", "must be positive"));
    }
    let e = mse(x, x_ref)?;
    if e == T::zero() {
        return Ok(T::infinity());
    }
    Ok(T::of(10.0) * (peak * peak / e).log10())
}

/// Mean SSIM over all window positions fully inside the image, with a
/// Gaussian window (std 1.5) of side `min(7, height, width)`.
pub fn ssim<T: Real>(x: &[T], x_ref: &[T], height: usize, width: usize, data_range: T) -> Result<T> {
    check_len("ssim", height * width, x.len())?;
    check_len("ssim", height * width, x_ref.len())?;
    if height == 0 || width == 0 {
        return Err(invalid("shape", "empty image"));
    }
    let side = 7.min(height).min(width);
    let (wh, ww) = (side.min(height), side.min(width));
    let win = gaussian_window::<T>(wh, ww, T::of(1.5));
    let c1 = (T::of(0.01) * data_range).powi(2);
    let c2 = (T::of(0.03) * data_range).powi(2);
    let mut total = T::zero();
    let mut count = 0usize;
    for i in 0..=(height - wh) {
        for j in 0..=(width - ww) {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
            for a in 0..wh {
                for b in 0..ww {
                    let w = win[a * ww + b];
                    let p = (i + a) * width + j + b;
                    mx = mx + w * x[p];
                    my = my + w * x_ref[p];
                    sxx = sxx + w * x[p] * x[p];
                    syy = syy + w * x_ref[p] * x_ref[p];
                    sxy = sxy + w * x[p] * x_ref[p];
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            let two = T::of(2.0);
            total = total
                + ((two * mx * my + c1) * (two * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / T::of_usize(count))
}

fn gaussian_window<T: Real>(h: usize, w: usize, std: T) -> Vec<T> {
    let ch = T::of(h as f64 - 1.0) / T::of(2.0);
    let cw = T::of(w as f64 - 1.0) / T::of(2.0);
    let mut out = Vec::with_capacity(h * w);
    for a in 0..h {
        for b in 0..w {
            let (da, db) = (T::of_usize(a) - ch, T::of_usize(b) - cw);
            out.push((-(da * da + db * db) / (T::of(2.0) * std * std)).exp());
        }
    }
    let s: T = out.iter().copied().sum();
    out.into_iter().map(|v| v / s).collect()
}

/// Fraction of runs whose PSNR falls below `threshold`.
pub fn failure_rate<T: Real>(psnrs: &[T], threshold: T) -> T {
    if psnrs.is_empty() {
        return T::zero();
    }
    T::of_usize(psnrs.iter().filter(|&&p| p < threshold).count()) / T::of_usize(psnrs.len())
}

/// Tweedie estimate and its score norm at a reference level, for traces.
pub fn denoised_score_norm<T: Real, M: ScoreModel<T> + ?Sized>(
    model: &M,
    x_t: &[T],
    sigma_t: T,
    sigma_ref: T,
) -> Result<T> {
    let x0 = tweedie_denoise(model, x_t, sigma_t)?;
    Ok(norm(&model.score(&x0, sigma_ref)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_plug_in() {
        let kb = KappaBound {
            sigma_min_plus: 1.0_f64,
            gamma: 0.1,
            lipschitz_c: 1.0,
            sigma_t: 10.0,
            residual_norm: 1.0,
        };
        assert!((kappa_lower_bound(&kb).unwrap() - 1000.0).abs() < 1e-9);
        let doubled = KappaBound { residual_norm: 2.0, ..kb };
        assert!((kappa_lower_bound(&doubled).unwrap() - 2000.0).abs() < 1e-9);
        assert!(kappa_lower_bound(&KappaBound { gamma: 0.0, ..kb }).is_err());
    }

    #[test]
    fn psnr_and_mse_by_hand() {
        let a = vec![0.0_f64; 4];
        let b = vec![0.1; 4];
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
    }

    #[test]
    fn kappa_sentinel_when_prior_vanishes() {
        let k = Kappa::from_norms(3.0_f64, 0.0);
        assert!(k.degenerate && k.value.is_infinite());
        assert_eq!(Kappa::from_norms(0.0_f64, 2.0).value, 0.0);
    }

    #[test]
    fn failure_rate_counts_below_threshold() {
        assert!((failure_rate(&[10.0_f64, 30.0, 24.9, 26.0], 25.0) - 0.5).abs() < 1e-15);
    }
}
