//! JSON run configuration, preset merging and instance construction.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Result;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use dapspp_core::operators::{
    Conv2d, DenseLinear, DownsampleAvg, HdrClip, Identity, ImageShape, MaskInpaint, PhaseMagnitude,
    SharedOperator,
};
use dapspp_core::rng::{normal_vec, stream, Purpose};
use dapspp_core::schedule::{sigma_threshold, DEFAULT_THRESHOLD_MULTIPLIER};
use dapspp_core::{
    GmmPrior, GradConvention, IsotropicGaussianPrior, Mat, Measurement, NoiseSchedule, OdeMethod, RefineConfig,
    SamplerConfig, ScoreModel, StepSizeSchedule,
};

use crate::arrayfile::ArrayFile;
use crate::image_prior::image_gmm;
use crate::presets;

/// Invalid or unresolvable configuration; the CLI maps it to exit status 2.
#[derive(Debug, thiserror::Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Dapspp,
    Daps,
    Dps,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Dapspp => "dapspp",
            SamplerKind::Daps => "daps",
            SamplerKind::Dps => "dps",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
}

impl ImageSpec {
    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.height, self.width)
    }
}

/// Either one number broadcast to every pixel or a full vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl ScalarOrVec {
    fn expand(&self, d: usize, field: &str) -> Result<Vec<f64>> {
        match self {
            ScalarOrVec::Scalar(v) => Ok(vec![*v; d]),
            ScalarOrVec::Vector(v) if v.len() == d => Ok(v.clone()),
            ScalarOrVec::Vector(v) => Err(config_err(format!("{field}: expected {d} values, got {}", v.len()))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    Isotropic {
        mean: ScalarOrVec,
        tau2: f64,
    },
    /// Mixture of smooth image patterns with a squared-exponential covariance.
    ImageGmm {
        #[serde(default = "default_image_variance")]
        variance: f64,
        #[serde(default = "default_length_scale")]
        length_scale: f64,
        #[serde(default = "default_nugget")]
        nugget: f64,
    },
    Gmm {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<Vec<f64>>>,
    },
    /// Rank-1 weights, rank-2 means (K × d) and rank-3 covariances (K × d × d).
    GmmFiles {
        weights: PathBuf,
        means: PathBuf,
        covariances: PathBuf,
    },
}

fn default_image_variance() -> f64 {
    0.02
}
fn default_length_scale() -> f64 {
    2.5
}
fn default_nugget() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Identity,
    /// Exactly one of `hole` (centered box), `mask` (nonzero = observed) or `mask_file`.
    Inpaint {
        #[serde(default)]
        hole: Option<[usize; 2]>,
        #[serde(default)]
        mask: Option<Vec<f64>>,
        #[serde(default)]
        mask_file: Option<PathBuf>,
    },
    GaussianBlur {
        #[serde(default = "default_blur_size")]
        size: usize,
        #[serde(default = "default_blur_std")]
        std: f64,
    },
    MotionBlur {
        #[serde(default = "default_motion_taps")]
        taps: usize,
    },
    /// Arbitrary kernel, inline or from a rank-2 array file.
    Conv {
        #[serde(default)]
        kernel: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        kernel_file: Option<PathBuf>,
    },
    Downsample {
        factor: usize,
    },
    Hdr {
        #[serde(default = "default_hdr_alpha")]
        alpha: f64,
    },
    Phase {
        #[serde(default = "default_oversample")]
        oversample: usize,
    },
    Dense {
        matrix: Vec<Vec<f64>>,
    },
}

fn default_blur_size() -> usize {
    7
}
fn default_blur_std() -> f64 {
    1.5
}
fn default_motion_taps() -> usize {
    5
}
fn default_hdr_alpha() -> f64 {
    2.0
}
fn default_oversample() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementSpec {
    /// True noise standard deviation of the observation.
    pub gamma: f64,
    /// Fixed observation; otherwise a ground truth is drawn from the prior.
    #[serde(default)]
    pub y: Option<Vec<f64>>,
    #[serde(default)]
    pub y_file: Option<PathBuf>,
    /// Seed for the synthetic truth and noise; `None` uses each run seed.
    #[serde(default)]
    pub instance_seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub n_steps: usize,
    pub rho: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSizeSpec {
    pub eta0: f64,
    pub delta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConventionSpec {
    #[default]
    Literal,
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineSpec {
    /// ULA iterations `J` per cycle.
    pub n_steps: usize,
    #[serde(default)]
    pub with_prior: bool,
    #[serde(default)]
    pub grad_convention: ConventionSpec,
    /// Prior-score level in the M-step; defaults to `sigma_min`.
    #[serde(default)]
    pub sigma_ref: Option<f64>,
    /// Effective γ in the likelihood gradient; defaults to the true γ.
    #[serde(default)]
    pub likelihood_gamma: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OdeMethodSpec {
    Euler,
    #[default]
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmStartSpec {
    /// Noise level of the state handed to each initializer.
    #[serde(default = "default_warm_sigma")]
    pub sigma_t: f64,
    #[serde(default = "default_warm_steps")]
    pub n_steps: usize,
    /// ULA step size; defaults to `eta0`.
    #[serde(default)]
    pub eta: Option<f64>,
}

fn default_warm_sigma() -> f64 {
    1.0
}
fn default_warm_steps() -> usize {
    30
}

impl Default for WarmStartSpec {
    fn default() -> Self {
        Self {
            sigma_t: default_warm_sigma(),
            n_steps: default_warm_steps(),
            eta: None,
        }
    }
}

fn default_ode_steps() -> usize {
    1
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub sampler: SamplerKind,
    pub image: ImageSpec,
    pub prior: PriorSpec,
    pub operator: OperatorSpec,
    pub measurement: MeasurementSpec,
    pub schedule: ScheduleSpec,
    pub step_size: StepSizeSpec,
    pub refine: RefineSpec,
    /// Tweedie/ODE threshold; defaults to `10·γ`.
    #[serde(default)]
    pub sigma_bar: Option<f64>,
    #[serde(default = "default_ode_steps")]
    pub ode_steps_below_bar: usize,
    #[serde(default)]
    pub ode_method: OdeMethodSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Record κ, A_t and score norms in the trace.
    #[serde(default)]
    pub diagnostics: bool,
    #[serde(default)]
    pub warm_start: WarmStartSpec,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Recursive object merge; arrays and scalars in `over` replace `base`.
/// An override object that names a `kind` replaces the base object wholesale.
pub fn deep_merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            if o.contains_key("kind") {
                *b = o.clone();
                return;
            }
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

impl RunConfig {
    /// Parses JSON text, layering it over its `preset` when one is named.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| config_err(format!("invalid JSON: {e}")))?;
        Self::from_value(user)
    }

    pub fn from_value(user: Value) -> Result<Self> {
        let merged = match user.get("preset").and_then(Value::as_str) {
            Some(name) => {
                let mut base = presets::preset(name).ok_or_else(|| {
                    config_err(format!("preset: unknown preset {name:?} (known: {})", presets::NAMES.join(", ")))
                })?;
                deep_merge(&mut base, &user);
                base
            }
            None => user,
        };
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::from_value(serde_json::json!({ "preset": name }))
    }

    /// Reads a config file; relative array-file paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let PriorSpec::GmmFiles {
            weights,
            means,
            covariances,
        } = &mut self.prior
        {
            fix(weights);
            fix(means);
            fix(covariances);
        }
        match &mut self.operator {
            OperatorSpec::Inpaint { mask_file: Some(p), .. } => fix(p),
            OperatorSpec::Conv { kernel_file: Some(p), .. } => fix(p),
            _ => {}
        }
        if let Some(p) = &mut self.measurement.y_file {
            fix(p);
        }
    }

    /// Structural checks that do not need array files or priors built.
    pub fn validate(&self) -> Result<()> {
        if self.image.height == 0 || self.image.width == 0 {
            return Err(config_err("image: height and width must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds: need at least one seed"));
        }
        if !(self.measurement.gamma > 0.0 && self.measurement.gamma.is_finite()) {
            return Err(config_err("measurement.gamma: must be positive"));
        }
        if self.measurement.y.is_some() && self.measurement.y_file.is_some() {
            return Err(config_err("measurement: give at most one of y and y_file"));
        }
        self.sampler_config(0).map(|_| ())
    }

    pub fn sigma_bar(&self) -> Result<f64> {
        match self.sigma_bar {
            Some(v) => Ok(v),
            None => sigma_threshold(self.measurement.gamma, DEFAULT_THRESHOLD_MULTIPLIER)
                .map_err(|e| config_err(format!("sigma_bar: {e}"))),
        }
    }

    pub fn sampler_config(&self, seed: u64) -> Result<SamplerConfig<f64>> {
        let s = &self.schedule;
        let schedule = NoiseSchedule::new(s.sigma_max, s.sigma_min, s.n_steps, s.rho)
            .map_err(|e| config_err(format!("schedule: {e}")))?;
        let step_sizes = StepSizeSchedule::new(self.step_size.eta0, self.step_size.delta)
            .map_err(|e| config_err(format!("step_size: {e}")))?;
        let r = &self.refine;
        let refine = RefineConfig {
            n_steps: r.n_steps,
            eta: self.step_size.eta0,
            with_prior: r.with_prior,
            grad_convention: match r.grad_convention {
                ConventionSpec::Literal => GradConvention::Literal,
                ConventionSpec::Exact => GradConvention::Exact,
            },
            sigma_ref: r.sigma_ref.unwrap_or(s.sigma_min),
            likelihood_gamma: r.likelihood_gamma,
        };
        let cfg = SamplerConfig {
            schedule,
            step_sizes,
            refine,
            sigma_bar: self.sigma_bar()?,
            ode_steps_below_bar: self.ode_steps_below_bar,
            ode_method: match self.ode_method {
                OdeMethodSpec::Euler => OdeMethod::Euler,
                OdeMethodSpec::Rk4 => OdeMethod::Rk4,
            },
            seed,
            diagnostics: self.diagnostics,
            keep_snapshots: false,
        };
        cfg.validate().map_err(|e| config_err(format!("{e}")))?;
        Ok(cfg)
    }

    pub fn build_prior(&self) -> Result<PriorModel> {
        let d = self.image.shape().len();
        let core = |e: dapspp_core::Error| config_err(format!("prior: {e}"));
        let prior = match &self.prior {
            PriorSpec::Isotropic { mean, tau2 } => {
                PriorModel::Isotropic(IsotropicGaussianPrior::new(mean.expand(d, "prior.mean")?, *tau2).map_err(core)?)
            }
            PriorSpec::ImageGmm {
                variance,
                length_scale,
                nugget,
            } => PriorModel::Gmm(image_gmm(self.image.shape(), *variance, *length_scale, *nugget).map_err(core)?),
            PriorSpec::Gmm {
                weights,
                means,
                covariances,
            } => {
                let covs = covariances.iter().map(|c| Mat::from_rows(c)).collect::<Result<Vec<_>, _>>().map_err(core)?;
                PriorModel::Gmm(GmmPrior::new(weights.clone(), means.clone(), covs).map_err(core)?)
            }
            PriorSpec::GmmFiles {
                weights,
                means,
                covariances,
            } => {
                let w = read_array(weights, 1)?;
                let m = read_array(means, 2)?;
                let c = read_array(covariances, 3)?;
                let (k, dd) = (m.shape[0], m.shape[1]);
                if w.shape[0] != k || c.shape != [k, dd, dd] {
                    return Err(config_err(format!(
                        "prior: inconsistent shapes weights {:?}, means {:?}, covariances {:?}",
                        w.shape, m.shape, c.shape
                    )));
                }
                let means = m.data.chunks(dd).map(<[f64]>::to_vec).collect();
                let covs = c
                    .data
                    .chunks(dd * dd)
                    .map(|b| Mat::from_row_major(dd, dd, b.to_vec()))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(core)?;
                PriorModel::Gmm(GmmPrior::new(w.data, means, covs).map_err(core)?)
            }
        };
        if prior.dim() != d {
            return Err(config_err(format!("prior: dimension {} does not match the {d}-pixel image", prior.dim())));
        }
        Ok(prior)
    }

    pub fn build_operator(&self) -> Result<SharedOperator<f64>> {
        let shape = self.image.shape();
        let core = |e: dapspp_core::Error| config_err(format!("operator: {e}"));
        let op: SharedOperator<f64> = match &self.operator {
            OperatorSpec::Identity => Arc::new(Identity::new(shape)),
            OperatorSpec::Inpaint { hole, mask, mask_file } => match (hole, mask, mask_file) {
                (Some([h, w]), None, None) => Arc::new(MaskInpaint::centered_box(shape, *h, *w).map_err(core)?),
                (None, Some(m), None) => Arc::new(MaskInpaint::new(shape, m.iter().map(|&v| v != 0.0).collect()).map_err(core)?),
                (None, None, Some(p)) => {
                    let a = read_array(p, 0)?;
                    Arc::new(MaskInpaint::new(shape, a.data.iter().map(|&v| v != 0.0).collect()).map_err(core)?)
                }
                _ => return Err(config_err("operator: inpaint needs exactly one of hole, mask, mask_file")),
            },
            OperatorSpec::GaussianBlur { size, std } => Arc::new(Conv2d::gaussian(shape, *size, *std).map_err(core)?),
            OperatorSpec::MotionBlur { taps } => Arc::new(Conv2d::motion(shape, *taps).map_err(core)?),
            OperatorSpec::Conv { kernel, kernel_file } => {
                let k = match (kernel, kernel_file) {
                    (Some(rows), None) => Mat::from_rows(rows).map_err(core)?,
                    (None, Some(p)) => {
                        let a = read_array(p, 2)?;
                        Mat::from_row_major(a.shape[0], a.shape[1], a.data).map_err(core)?
                    }
                    _ => return Err(config_err("operator: conv needs exactly one of kernel, kernel_file")),
                };
                Arc::new(Conv2d::new(shape, k).map_err(core)?)
            }
            OperatorSpec::Downsample { factor } => Arc::new(DownsampleAvg::square(shape, *factor).map_err(core)?),
            OperatorSpec::Hdr { alpha } => Arc::new(HdrClip::new(shape, *alpha).map_err(core)?),
            OperatorSpec::Phase { oversample } => Arc::new(PhaseMagnitude::new(shape, *oversample).map_err(core)?),
            OperatorSpec::Dense { matrix } => {
                Arc::new(DenseLinear::new(shape, Mat::from_rows(matrix).map_err(core)?).map_err(core)?)
            }
        };
        Ok(op)
    }

    /// Prior, operator and the seed-independent part of the problem.
    pub fn build(&self) -> Result<Problem> {
        let prior = Arc::new(self.build_prior()?);
        let operator = self.build_operator()?;
        let fixed_y = match (&self.measurement.y, &self.measurement.y_file) {
            (Some(y), None) => Some(y.clone()),
            (None, Some(p)) => Some(read_array(p, 0)?.data),
            _ => None,
        };
        if let Some(y) = &fixed_y {
            if y.len() != operator.output_len() {
                return Err(config_err(format!(
                    "measurement: y has {} entries, the operator produces {}",
                    y.len(),
                    operator.output_len()
                )));
            }
        }
        Ok(Problem {
            prior,
            operator,
            gamma: self.measurement.gamma,
            fixed_y,
            instance_seed: self.measurement.instance_seed,
        })
    }
}

fn read_array(path: &Path, rank: usize) -> Result<ArrayFile> {
    let a = ArrayFile::read(path).map_err(|e| config_err(format!("{e:#}")))?;
    if rank != 0 && a.shape.len() != rank {
        return Err(config_err(format!(
            "{}: expected a rank-{rank} array, got shape {:?}",
            path.display(),
            a.shape
        )));
    }
    Ok(a)
}

/// The analytic priors a config can name.
#[derive(Clone, Debug)]
pub enum PriorModel {
    Isotropic(IsotropicGaussianPrior<f64>),
    Gmm(GmmPrior<f64>),
}

impl PriorModel {
    /// The same prior as a mixture, for the posterior oracle.
    pub fn as_gmm(&self) -> Result<GmmPrior<f64>> {
        match self {
            PriorModel::Gmm(g) => Ok(g.clone()),
            PriorModel::Isotropic(p) => {
                let d = p.mean().len();
                Ok(GmmPrior::new(vec![1.0], vec![p.mean().to_vec()], vec![Mat::identity(d).scaled(p.tau2())])?)
            }
        }
    }
}

impl ScoreModel<f64> for PriorModel {
    fn dim(&self) -> usize {
        match self {
            PriorModel::Isotropic(p) => p.dim(),
            PriorModel::Gmm(p) => p.dim(),
        }
    }
    fn score(&self, x: &[f64], sigma: f64) -> dapspp_core::Result<Vec<f64>> {
        match self {
            PriorModel::Isotropic(p) => p.score(x, sigma),
            PriorModel::Gmm(p) => p.score(x, sigma),
        }
    }
    fn log_density(&self, x: &[f64], sigma: f64) -> dapspp_core::Result<f64> {
        match self {
            PriorModel::Isotropic(p) => p.log_density(x, sigma),
            PriorModel::Gmm(p) => p.log_density(x, sigma),
        }
    }
    fn sample(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        match self {
            PriorModel::Isotropic(p) => p.sample(rng),
            PriorModel::Gmm(p) => p.sample(rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Problem {
    pub prior: Arc<PriorModel>,
    pub operator: SharedOperator<f64>,
    pub gamma: f64,
    fixed_y: Option<Vec<f64>>,
    instance_seed: Option<u64>,
}

/// One observed instance: the measurement and, when synthetic, its truth.
#[derive(Clone, Debug)]
pub struct Instance {
    pub measurement: Measurement<f64>,
    pub truth: Option<Vec<f64>>,
}

impl Problem {
    pub fn instance(&self, seed: u64) -> Result<Instance> {
        if let Some(y) = &self.fixed_y {
            return Ok(Instance {
                measurement: Measurement::new(y.clone(), self.gamma, self.operator.clone())?,
                truth: None,
            });
        }
        let s = self.instance_seed.unwrap_or(seed);
        let truth = self.prior.sample(&mut stream(s, Purpose::Truth, 0));
        let clean = self.operator.apply(&truth)?;
        let noise: Vec<f64> = normal_vec(&mut stream(s, Purpose::Measurement, 0), clean.len());
        let y = clean.iter().zip(noise).map(|(c, e)| c + self.gamma * e).collect();
        Ok(Instance {
            measurement: Measurement::new(y, self.gamma, self.operator.clone())?,
            truth: Some(truth),
        })
    }
}
