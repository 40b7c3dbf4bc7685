//! Closed-form score models and the Tweedie denoiser.
//!
//! The analytic priors stand in for a trained score network: every quantity a
//! network would approximate (`∇ log p_σ`, `log p_σ`, clean samples) is exact
//! here, which is what lets downstream checks compare against closed forms.

use rand::Rng;

use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::{dot, Mat, SymmetricEigen};
use crate::rng::normal_vec;
use crate::scalar::Real;

/// Noise-conditioned prior, `p_σ = p₀ ∗ N(0, σ²I)`.
pub trait ScoreModel<T: Real>: Send + Sync {
    fn dim(&self) -> usize;

    /// `∇ₓ log p_σ(x)`; requires `sigma > 0`.
    fn score(&self, x: &[T], sigma: T) -> Result<Vec<T>>;

    /// `log p_σ(x)`; `sigma = 0` is the clean density.
    fn log_density(&self, _x: &[T], _sigma: T) -> Result<T> {
        Err(Error::Unsupported("model has no closed-form density".into()))
    }

    /// Exact draw from the clean prior.
    fn sample(&self, rng: &mut dyn rand::RngCore) -> Vec<T>;
}

impl<T: Real, M: ScoreModel<T> + ?Sized> ScoreModel<T> for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score(&self, x: &[T], sigma: T) -> Result<Vec<T>> {
        (**self).score(x, sigma)
    }
    fn log_density(&self, x: &[T], sigma: T) -> Result<T> {
        (**self).log_density(x, sigma)
    }
    fn sample(&self, rng: &mut dyn rand::RngCore) -> Vec<T> {
        (**self).sample(rng)
    }
}

fn check_sigma_positive<T: Real>(sigma: T) -> Result<()> {
    if sigma > T::zero() && sigma.is_finite() {
        Ok(())
    } else {
        Err(invalid("sigma", format!("score needs a positive noise level, got {sigma}")))
    }
}

fn check_sigma_nonnegative<T: Real>(sigma: T) -> Result<()> {
    if sigma >= T::zero() && sigma.is_finite() {
        Ok(())
    } else {
        Err(invalid("sigma", format!("noise level must be nonnegative, got {sigma}")))
    }
}

fn log_2pi<T: Real>() -> T {
    (T::of(2.0) * T::PI()).ln()
}

pub fn score<T: Real, M: ScoreModel<T> + ?Sized>(model: &M, x: &[T], sigma: T) -> Result<Vec<T>> {
    model.score(x, sigma)
}

pub fn log_density<T: Real, M: ScoreModel<T> + ?Sized>(model: &M, x: &[T], sigma: T) -> Result<T> {
    model.log_density(x, sigma)
}

pub fn sample_prior<T: Real, M: ScoreModel<T> + ?Sized, R: Rng>(model: &M, rng: &mut R) -> Vec<T> {
    model.sample(rng)
}

/// Posterior-mean denoiser `E[x₀ | x_t] = x_t + σ²·∇ log p_σ(x_t)`.
pub fn tweedie_denoise<T: Real, M: ScoreModel<T> + ?Sized>(model: &M, x_t: &[T], sigma: T) -> Result<Vec<T>> {
    check_len("tweedie_denoise", model.dim(), x_t.len())?;
    check_sigma_nonnegative(sigma)?;
    if sigma == T::zero() {
        return Ok(x_t.to_vec());
    }
    let s = model.score(x_t, sigma)?;
    let s2 = sigma * sigma;
    Ok(x_t.iter().zip(&s).map(|(&x, &g)| x + s2 * g).collect())
}

/// `N(mu, tau2·I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IsotropicGaussianPrior<T> {
    mu: Vec<T>,
    tau2: T,
}

impl<T: Real> IsotropicGaussianPrior<T> {
    pub fn new(mu: Vec<T>, tau2: T) -> Result<Self> {
        if mu.is_empty() {
            return Err(invalid("mu", "prior dimension must be at least 1"));
        }
        if !(tau2 > T::zero() && tau2.is_finite()) {
            return Err(invalid("tau2", "prior variance must be positive"));
        }
        Ok(Self { mu, tau2 })
    }

    pub fn mean(&self) -> &[T] {
        &self.mu
    }

    pub fn tau2(&self) -> T {
        self.tau2
    }
}

impl<T: Real> ScoreModel<T> for IsotropicGaussianPrior<T> {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn score(&self, x: &[T], sigma: T) -> Result<Vec<T>> {
        check_len("score", self.mu.len(), x.len())?;
        check_sigma_positive(sigma)?;
        let v = self.tau2 + sigma * sigma;
        Ok(x.iter().zip(&self.mu).map(|(&xi, &m)| -(xi - m) / v).collect())
    }

    fn log_density(&self, x: &[T], sigma: T) -> Result<T> {
        check_len("log_density", self.mu.len(), x.len())?;
        check_sigma_nonnegative(sigma)?;
        let v = self.tau2 + sigma * sigma;
        let d = T::of_usize(self.mu.len());
        let q: T = x.iter().zip(&self.mu).map(|(&xi, &m)| (xi - m) * (xi - m)).sum();
        Ok(-T::of(0.5) * (q / v + d * (log_2pi::<T>() + v.ln())))
    }

    fn sample(&self, rng: &mut dyn rand::RngCore) -> Vec<T> {
        let tau = self.tau2.sqrt();
        let xi: Vec<T> = normal_vec(rng, self.mu.len());
        self.mu.iter().zip(xi).map(|(&m, z)| m + tau * z).collect()
    }
}

/// One mixture component, stored through the eigendecomposition of its
/// covariance so that `Σ + σ²I = U diag(λ + σ²) Uᵀ` needs no per-σ work.
#[derive(Clone, Debug)]
struct Component<T> {
    log_weight: T,
    mean: Vec<T>,
    covariance: Mat<T>,
    eigenvalues: Vec<T>,
    eigenvectors: Mat<T>,
}

impl<T: Real> Component<T> {
    /// Returns `(log N(x; μ, Σ+σ²I), −(Σ+σ²I)⁻¹(x−μ))`.
    fn log_density_and_score(&self, x: &[T], s2: T, want_score: bool) -> (T, Option<Vec<T>>) {
        let d = self.mean.len();
        let diff: Vec<T> = x.iter().zip(&self.mean).map(|(&a, &b)| a - b).collect();
        // coordinates in the eigenbasis: c = Uᵀ diff
        let c = self.eigenvectors.tmatvec(&diff);
        let mut quad = T::zero();
        let mut log_det = T::zero();
        let mut w = Vec::with_capacity(d);
        for (ck, &lk) in c.iter().zip(&self.eigenvalues) {
            let v = lk + s2;
            quad = quad + *ck * *ck / v;
            log_det = log_det + v.ln();
            w.push(*ck / v);
        }
        let logp = -T::of(0.5) * (quad + log_det + T::of_usize(d) * log_2pi::<T>());
        let score = want_score.then(|| {
            let mut s = self.eigenvectors.matvec(&w);
            for v in &mut s {
                *v = -*v;
            }
            s
        });
        (logp, score)
    }
}

/// Gaussian mixture `Σ_k w_k N(μ_k, Σ_k)`; smoothing at σ adds `σ²I` to every
/// component covariance.
#[derive(Clone, Debug)]
pub struct GmmPrior<T> {
    dim: usize,
    components: Vec<Component<T>>,
}

impl<T: Real> GmmPrior<T> {
    pub fn new(weights: Vec<T>, means: Vec<Vec<T>>, covariances: Vec<Mat<T>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(invalid("weights", "mixture needs at least one component"));
        }
        if means.len() != k || covariances.len() != k {
            return Err(invalid(
                "components",
                format!(
                    "{k} weights but {} means and {} covariances",
                    means.len(),
                    covariances.len()
                ),
            ));
        }
        if weights.iter().any(|w| !(*w > T::zero() && w.is_finite())) {
            return Err(invalid("weights", "all weights must be positive"));
        }
        let total: T = weights.iter().copied().sum();
        if (total - T::one()).abs() > T::of(1e-6) {
            return Err(invalid("weights", format!("must sum to 1, got {total}")));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(invalid("means", "component dimension must be at least 1"));
        }
        let mut components = Vec::with_capacity(k);
        for ((w, mean), cov) in weights.into_iter().zip(means).zip(covariances) {
            check_len("gmm mean", dim, mean.len())?;
            if cov.rows() != dim || cov.cols() != dim {
                return Err(invalid("covariances", format!("each covariance must be {dim}x{dim}")));
            }
            if !cov.is_symmetric(T::of(1e-10)) {
                return Err(invalid("covariances", "covariance must be symmetric"));
            }
            let eig = SymmetricEigen::new(&cov)?;
            if eig.eigenvalues.iter().any(|l| !(*l > T::zero())) {
                return Err(invalid("covariances", "covariance must be positive definite"));
            }
            components.push(Component {
                log_weight: (w / total).ln(),
                mean,
                covariance: cov,
                eigenvalues: eig.eigenvalues,
                eigenvectors: eig.eigenvectors,
            });
        }
        Ok(Self { dim, components })
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> Vec<T> {
        self.components.iter().map(|c| c.log_weight.exp()).collect()
    }

    pub fn means(&self) -> Vec<Vec<T>> {
        self.components.iter().map(|c| c.mean.clone()).collect()
    }

    pub fn covariances(&self) -> Vec<Mat<T>> {
        self.components.iter().map(|c| c.covariance.clone()).collect()
    }

    /// Component posterior probabilities at noise level σ, computed in log space.
    pub fn responsibilities(&self, x: &[T], sigma: T) -> Result<Vec<T>> {
        check_len("responsibilities", self.dim, x.len())?;
        check_sigma_nonnegative(sigma)?;
        let s2 = sigma * sigma;
        let logs: Vec<T> = self
            .components
            .iter()
            .map(|c| c.log_weight + c.log_density_and_score(x, s2, false).0)
            .collect();
        let lse = log_sum_exp(&logs);
        Ok(logs.iter().map(|&l| (l - lse).exp()).collect())
    }
}

pub(crate) fn log_sum_exp<T: Real>(v: &[T]) -> T {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

impl<T: Real> ScoreModel<T> for GmmPrior<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &[T], sigma: T) -> Result<Vec<T>> {
        check_len("score", self.dim, x.len())?;
        check_sigma_positive(sigma)?;
        let s2 = sigma * sigma;
        let parts: Vec<(T, Vec<T>)> = self
            .components
            .iter()
            .map(|c| {
                let (lp, s) = c.log_density_and_score(x, s2, true);
                (c.log_weight + lp, s.expect("score requested"))
            })
            .collect();
        let logs: Vec<T> = parts.iter().map(|p| p.0).collect();
        let lse = log_sum_exp(&logs);
        let mut out = vec![T::zero(); self.dim];
        for (l, s) in &parts {
            let r = (*l - lse).exp();
            for (o, &v) in out.iter_mut().zip(s) {
                *o = *o + r * v;
            }
        }
        Ok(out)
    }

    fn log_density(&self, x: &[T], sigma: T) -> Result<T> {
        check_len("log_density", self.dim, x.len())?;
        check_sigma_nonnegative(sigma)?;
        let s2 = sigma * sigma;
        let logs: Vec<T> = self
            .components
            .iter()
            .map(|c| c.log_weight + c.log_density_and_score(x, s2, false).0)
            .collect();
        Ok(log_sum_exp(&logs))
    }

    fn sample(&self, rng: &mut dyn rand::RngCore) -> Vec<T> {
        self.sample_labeled(rng).1
    }
}

impl<T: Real> GmmPrior<T> {
    /// Draws a component index from the weights, then a Gaussian draw from it.
    pub fn sample_labeled(&self, rng: &mut dyn rand::RngCore) -> (usize, Vec<T>) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.log_weight.exp().as_f64();
            if u < acc {
                pick = k;
                break;
            }
        }
        let c = &self.components[pick];
        let xi: Vec<T> = normal_vec(rng, self.dim);
        let scaled: Vec<T> = xi
            .iter()
            .zip(&c.eigenvalues)
            .map(|(&z, &l)| z * l.sqrt())
            .collect();
        let dev = c.eigenvectors.matvec(&scaled);
        (pick, c.mean.iter().zip(dev).map(|(&m, v)| m + v).collect())
    }
}

/// Score-norm proxy for how close `x` sits to the clean data manifold.
pub fn score_norm<T: Real, M: ScoreModel<T> + ?Sized>(model: &M, x: &[T], sigma: T) -> Result<T> {
    let s = model.score(x, sigma)?;
    Ok(dot(&s, &s).sqrt())
}
