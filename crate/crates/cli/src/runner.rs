//! Subcommand implementations. Every seed writes into its own `seed_<n>/`
//! directory; aggregate tables are written after all seeds finish.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{debug, info};
use rayon::prelude::*;
use serde_json::{json, Value};

use dapspp_core::diagnostics::{
    gmm_posterior_oracle, gradient_pair, kappa_lower_bound, lipschitz_estimate, moment_error, mse, psnr,
    score_magnitude_constant, ssim, KappaBound, MomentError, PosteriorOracle,
};
use dapspp_core::linalg::norm;
use dapspp_core::operators::min_nonzero_singular;
use dapspp_core::refine::{warm_start_compare, warm_start_threshold};
use dapspp_core::rng::{normal_vec, stream, Purpose};
use dapspp_core::sampler::{dps_equivalence_check, run_daps_baseline, run_dapspp, run_dps_baseline};
use dapspp_core::{Measurement, SamplerOutput, WarmStart};

use crate::arrayfile::ArrayFile;
use crate::config::{ConfigError, Instance, Problem, RunConfig, SamplerKind};

/// Per-seed outcome written to `summary.json`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub sampler: SamplerKind,
    pub nfe: usize,
    pub prior_evals: usize,
    pub residual_norm: f64,
    /// `‖y − A(x)‖ / (γ√m)`.
    pub residual_ratio: f64,
    pub mse: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

fn json_f64(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        json!("nan")
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn json_opt(v: Option<f64>) -> Value {
    v.map(json_f64).unwrap_or(Value::Null)
}

impl RunSummary {
    pub fn to_json(&self) -> Value {
        json!({
            "seed": self.seed,
            "sampler": self.sampler.as_str(),
            "nfe": self.nfe,
            "prior_evals": self.prior_evals,
            "residual_norm": json_f64(self.residual_norm),
            "residual_ratio": json_f64(self.residual_ratio),
            "mse": json_opt(self.mse),
            "psnr": json_opt(self.psnr),
            "ssim": json_opt(self.ssim),
        })
    }
}

/// Shortest round-trip text, exponent form for very small or large values.
fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

/// Runs the configured sampler on one instance.
pub fn sample(cfg: &RunConfig, problem: &Problem, m: &Measurement<f64>, seed: u64) -> Result<SamplerOutput<f64>> {
    let scfg = cfg.sampler_config(seed)?;
    sample_with(cfg.sampler, problem, m, &scfg)
}

fn sample_with(
    kind: SamplerKind,
    problem: &Problem,
    m: &Measurement<f64>,
    scfg: &dapspp_core::SamplerConfig<f64>,
) -> Result<SamplerOutput<f64>> {
    let prior = problem.prior.as_ref();
    let out = match kind {
        SamplerKind::Dapspp => run_dapspp(prior, m, scfg),
        SamplerKind::Daps => run_daps_baseline(prior, m, scfg),
        SamplerKind::Dps => run_dps_baseline(prior, m, scfg),
    }?;
    Ok(out)
}

pub fn summarize(
    cfg: &RunConfig,
    seed: u64,
    inst: &Instance,
    out: &SamplerOutput<f64>,
) -> Result<RunSummary> {
    let m = &inst.measurement;
    let r = dapspp_core::operators::residual(m.operator.as_ref(), &out.x, &m.y)?;
    let (mut e, mut p, mut s) = (None, None, None);
    if let Some(truth) = &inst.truth {
        e = Some(mse(&out.x, truth)?);
        p = Some(psnr(&out.x, truth, 1.0)?);
        s = ssim(&out.x, truth, cfg.image.height, cfg.image.width, 1.0).ok();
    }
    Ok(RunSummary {
        seed,
        sampler: cfg.sampler,
        nfe: out.trace.total_nfe,
        prior_evals: out.trace.prior_evals,
        residual_norm: norm(&r),
        residual_ratio: m.residual_ratio(&out.x)?,
        mse: e,
        psnr: p,
        ssim: s,
    })
}

const TRACE_HEADER: [&str; 15] = [
    "kind",
    "cycle",
    "step",
    "sigma",
    "sigma_next",
    "branch",
    "eta",
    "nfe",
    "residual_norm",
    "grad_norm",
    "kappa",
    "kappa_degenerate",
    "inner_product",
    "score_norm_x0",
    "prior_evals",
];

/// `cycle` rows carry the per-cycle record; `refine` rows the M-step iterates.
pub fn write_trace(path: &Path, out: &SamplerOutput<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(TRACE_HEADER)?;
    let mut refine = out.trace.refine.iter().peekable();
    for c in &out.trace.cycles {
        while let Some((k, r)) = refine.next_if(|(k, _)| *k == c.cycle) {
            w.write_record([
                "refine".to_string(),
                k.to_string(),
                r.step.to_string(),
                fmt(c.sigma),
                String::new(),
                String::new(),
                fmt(c.eta),
                String::new(),
                fmt(r.residual_norm),
                fmt(r.grad_norm),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        w.write_record([
            "cycle".to_string(),
            c.cycle.to_string(),
            String::new(),
            fmt(c.sigma),
            fmt_opt(c.sigma_next),
            c.branch.as_str().to_string(),
            fmt(c.eta),
            c.nfe.to_string(),
            fmt(c.residual_norm),
            String::new(),
            fmt_opt(c.kappa.map(|k| k.value)),
            c.kappa.map(|k| k.degenerate.to_string()).unwrap_or_default(),
            fmt_opt(c.inner_product),
            fmt_opt(c.score_norm_x0),
            out.trace.prior_evals.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn run_seed(cfg: &RunConfig, problem: &Problem, seed: u64, dir: &Path) -> Result<RunSummary> {
    create_dir(dir)?;
    let inst = problem.instance(seed)?;
    let out = sample(cfg, problem, &inst.measurement, seed)?;
    write_trace(&dir.join("trace.csv"), &out)?;
    ArrayFile::new(vec![cfg.image.height, cfg.image.width], out.x.clone())?.write(&dir.join("final.dpx"))?;
    let summary = summarize(cfg, seed, &inst, &out)?;
    write_json(&dir.join("summary.json"), &summary.to_json())?;
    debug!("seed {seed}: nfe {} residual ratio {:.4}", summary.nfe, summary.residual_ratio);
    Ok(summary)
}

fn write_runs_csv(path: &Path, rows: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "sampler", "nfe", "prior_evals", "residual_norm", "residual_ratio", "mse", "psnr", "ssim"])?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.sampler.as_str().to_string(),
            r.nfe.to_string(),
            r.prior_evals.to_string(),
            fmt(r.residual_norm),
            fmt(r.residual_ratio),
            fmt_opt(r.mse),
            fmt_opt(r.psnr),
            fmt_opt(r.ssim),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `run`: every seed in parallel, then `runs.csv` over all seeds.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<Vec<RunSummary>> {
    let problem = cfg.build()?;
    create_dir(out)?;
    write_json(&out.join("config.json"), &serde_json::to_value(cfg)?)?;
    info!("{} seed(s), sampler {}", cfg.seeds.len(), cfg.sampler.as_str());
    let rows = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, &problem, seed, &seed_dir(out, seed)))
        .collect::<Result<Vec<_>>>()?;
    write_runs_csv(&out.join("runs.csv"), &rows)?;
    Ok(rows)
}

pub const SWEEP_PARAMS: [&str; 5] = ["sigma_bar", "rho", "gamma", "J", "K"];

fn as_count(param: &str, v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(ConfigError(format!("{param}: expected a nonnegative integer, got {v}")).into())
    }
}

/// Copy of `cfg` with one parameter replaced; validates the result.
pub fn with_param(cfg: &RunConfig, param: &str, v: f64) -> Result<RunConfig> {
    let mut c = cfg.clone();
    match param {
        "sigma_bar" => c.sigma_bar = Some(v),
        "rho" => c.schedule.rho = v,
        "gamma" => c.measurement.gamma = v,
        "J" => c.refine.n_steps = as_count(param, v)?,
        "K" => c.schedule.n_steps = as_count(param, v)? + 1,
        _ => {
            return Err(ConfigError(format!(
                "param: unknown sweep parameter {param:?} (known: {})",
                SWEEP_PARAMS.join(", ")
            ))
            .into())
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub summaries: Vec<RunSummary>,
}

impl SweepRow {
    pub fn nfe(&self) -> usize {
        self.summaries.iter().map(|s| s.nfe).max().unwrap_or(0)
    }

    fn mean(&self, f: impl Fn(&RunSummary) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.summaries.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// `sweep`: one run directory per value and `sweep.csv` with seed means.
pub fn sweep(cfg: &RunConfig, param: &str, values: &[f64], out: &Path) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(ConfigError("values: empty value list".into()).into());
    }
    let configs = values
        .iter()
        .map(|&v| with_param(cfg, param, v))
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    let mut rows = Vec::with_capacity(values.len());
    for (&v, c) in values.iter().zip(&configs) {
        let dir = out.join(format!("{param}_{v}"));
        info!("sweep {param} = {v}");
        rows.push(SweepRow {
            value: v,
            summaries: run(c, &dir)?,
        });
    }
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    w.write_record([
        "param",
        "value",
        "n_seeds",
        "nfe",
        "residual_ratio",
        "mse",
        "psnr",
        "ssim",
    ])?;
    for r in &rows {
        w.write_record([
            param.to_string(),
            fmt(r.value),
            r.summaries.len().to_string(),
            r.nfe().to_string(),
            fmt_opt(r.mean(|s| Some(s.residual_ratio))),
            fmt_opt(r.mean(|s| s.mse)),
            fmt_opt(r.mean(|s| s.psnr.filter(|p| p.is_finite()))),
            fmt_opt(r.mean(|s| s.ssim)),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}

/// One row of `diagnostics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticRow {
    pub cycle: usize,
    pub sigma: f64,
    pub kappa: f64,
    pub kappa_degenerate: bool,
    pub inner_product: f64,
    pub residual_norm: f64,
    pub sigma_min_plus: Option<f64>,
    pub lipschitz_c: f64,
    pub kappa_bound: Option<f64>,
    pub magnitude_c: f64,
    pub magnitude_bound: Option<f64>,
    pub equiv_max_abs_diff: f64,
    pub equiv_relative_diff: f64,
}

const LIPSCHITZ_PROBES: usize = 16;

/// κ, A_t, the κ lower bound (probe Lipschitz and score-magnitude constants)
/// and the coupled/decomposed DPS difference at every cycle's E-step input.
pub fn diagnose_seed(cfg: &RunConfig, problem: &Problem, seed: u64) -> Result<(Vec<DiagnosticRow>, Vec<WarmRow>)> {
    let inst = problem.instance(seed)?;
    let m = &inst.measurement;
    let mut scfg = cfg.sampler_config(seed)?;
    scfg.diagnostics = true;
    scfg.keep_snapshots = true;
    let out = sample_with(SamplerKind::Dapspp, problem, m, &scfg)?;
    let prior = problem.prior.as_ref();
    let op = m.operator.as_ref();
    let gamma = scfg.refine.likelihood_gamma.unwrap_or(m.gamma);
    let sigma_min_plus = if op.is_linear() { Some(min_nonzero_singular(op)?) } else { None };
    let mut rows = Vec::with_capacity(out.trace.cycles.len());
    for (c, x_t) in out.trace.cycles.iter().zip(&out.trace.states) {
        let pair = gradient_pair(prior, op, x_t, &m.y, gamma, c.sigma)?;
        let kappa = dapspp_core::diagnostics::Kappa::from_pair(&pair);
        let rn = norm(&pair.residual);
        let mut rng = stream(seed, Purpose::Probe, c.cycle as u64);
        let lip = lipschitz_estimate(prior, c.sigma, LIPSCHITZ_PROBES, &mut rng)?.c;
        let mag = score_magnitude_constant(prior, c.sigma, std::slice::from_ref(x_t))?;
        let bound = |cc: f64| {
            sigma_min_plus.and_then(|s| {
                kappa_lower_bound(&KappaBound {
                    sigma_min_plus: s,
                    gamma,
                    lipschitz_c: cc,
                    sigma_t: c.sigma,
                    residual_norm: rn,
                })
                .ok()
            })
        };
        let eq = dps_equivalence_check(prior, m, x_t, c.sigma, c.sigma_next.unwrap_or(0.0), c.eta, seed ^ c.cycle as u64)?;
        rows.push(DiagnosticRow {
            cycle: c.cycle,
            sigma: c.sigma,
            kappa: kappa.value,
            kappa_degenerate: kappa.degenerate,
            inner_product: dapspp_core::linalg::dot(&pair.likelihood, &pair.prior),
            residual_norm: rn,
            sigma_min_plus,
            lipschitz_c: lip,
            kappa_bound: bound(lip),
            magnitude_c: mag,
            magnitude_bound: bound(mag),
            equiv_max_abs_diff: eq.max_abs_diff,
            equiv_relative_diff: eq.relative_diff,
        });
    }
    let warm = warm_start_rows(cfg, problem, &inst, &out.x, seed)?;
    Ok((rows, warm))
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarmRow {
    pub init: WarmStart,
    pub iterations_to_threshold: Option<usize>,
    pub initial_residual: f64,
    pub final_residual: f64,
    pub threshold: f64,
}

/// Refinement from each initializer at `x_t = x₀ + σ_t·ε`, with `x₀` the
/// synthetic truth (or the sampler output when the observation is fixed).
fn warm_start_rows(cfg: &RunConfig, problem: &Problem, inst: &Instance, fallback: &[f64], seed: u64) -> Result<Vec<WarmRow>> {
    let ws = cfg.warm_start;
    let x0 = inst.truth.as_deref().unwrap_or(fallback);
    let e: Vec<f64> = normal_vec(&mut stream(seed, Purpose::WarmStart, 1), x0.len());
    let x_t: Vec<f64> = x0.iter().zip(e).map(|(a, b)| a + ws.sigma_t * b).collect();
    let mut rcfg = cfg.sampler_config(seed)?.refine;
    rcfg.n_steps = ws.n_steps;
    rcfg.eta = ws.eta.unwrap_or(cfg.step_size.eta0);
    let m = &inst.measurement;
    let threshold = warm_start_threshold(m);
    let rows = warm_start_compare(m, problem.prior.as_ref(), &x_t, ws.sigma_t, &WarmStart::ALL, &rcfg, seed)?;
    Ok(rows
        .into_iter()
        .map(|r| WarmRow {
            init: r.init,
            iterations_to_threshold: r.iterations_to_threshold,
            initial_residual: r.initial_residual,
            final_residual: r.final_residual,
            threshold,
        })
        .collect())
}

/// `diagnose`: `diagnostics.csv` and `warm_start.csv` per seed.
pub fn diagnose(cfg: &RunConfig, out: &Path) -> Result<Vec<(u64, Vec<DiagnosticRow>)>> {
    let problem = cfg.build()?;
    create_dir(out)?;
    let results = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let dir = seed_dir(out, seed);
            create_dir(&dir)?;
            let (rows, warm) = diagnose_seed(cfg, &problem, seed)?;
            write_diagnostics(&dir.join("diagnostics.csv"), &rows)?;
            write_warm(&dir.join("warm_start.csv"), &warm)?;
            Ok((seed, rows))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(results)
}

fn write_diagnostics(path: &Path, rows: &[DiagnosticRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "cycle",
        "sigma",
        "kappa",
        "kappa_degenerate",
        "inner_product",
        "residual_norm",
        "sigma_min_plus",
        "lipschitz_c",
        "kappa_bound",
        "magnitude_c",
        "magnitude_bound",
        "equiv_max_abs_diff",
        "equiv_relative_diff",
    ])?;
    for r in rows {
        w.write_record([
            r.cycle.to_string(),
            fmt(r.sigma),
            fmt(r.kappa),
            r.kappa_degenerate.to_string(),
            fmt(r.inner_product),
            fmt(r.residual_norm),
            fmt_opt(r.sigma_min_plus),
            fmt(r.lipschitz_c),
            fmt_opt(r.kappa_bound),
            fmt(r.magnitude_c),
            fmt_opt(r.magnitude_bound),
            fmt(r.equiv_max_abs_diff),
            fmt(r.equiv_relative_diff),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_warm(path: &Path, rows: &[WarmRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["init", "iterations_to_threshold", "initial_residual", "final_residual", "threshold"])?;
    for r in rows {
        w.write_record([
            r.init.as_str().to_string(),
            r.iterations_to_threshold.map(|v| v.to_string()).unwrap_or_default(),
            fmt(r.initial_residual),
            fmt(r.final_residual),
            fmt(r.threshold),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Oracle, sampler moments and the errors between them.
#[derive(Clone, Debug)]
pub struct OracleReport {
    pub oracle: PosteriorOracle<f64>,
    pub samples: Vec<Vec<f64>>,
    pub errors: MomentError<f64>,
}

/// Mixture in the `gmm` prior config format.
pub fn oracle_to_prior_json(o: &PosteriorOracle<f64>) -> Value {
    json!({
        "kind": "gmm",
        "weights": o.weights,
        "means": o.means,
        "covariances": o.covariances.iter().map(|c| c.to_rows()).collect::<Vec<_>>(),
    })
}

/// Draws one sample per seed for a single fixed observation and compares
/// the sample moments with the exact posterior.
pub fn oracle_report(cfg: &RunConfig) -> Result<OracleReport> {
    let problem = cfg.build()?;
    let inst = problem.instance(cfg.seeds[0])?;
    let m = &inst.measurement;
    let gmm = problem.prior.as_gmm()?;
    let oracle = gmm_posterior_oracle(&gmm, m.operator.as_ref(), &m.y, m.gamma)?;
    let samples = cfg
        .seeds
        .par_iter()
        .map(|&seed| Ok(sample(cfg, &problem, m, seed)?.x))
        .collect::<Result<Vec<_>>>()?;
    let errors = moment_error(&samples, &oracle)?;
    Ok(OracleReport { oracle, samples, errors })
}

pub fn oracle_check(cfg: &RunConfig, out: &Path) -> Result<OracleReport> {
    let report = oracle_report(cfg)?;
    create_dir(out)?;
    write_json(&out.join("oracle.json"), &oracle_to_prior_json(&report.oracle))?;
    let e = &report.errors;
    write_json(
        &out.join("oracle_check.json"),
        &json!({
            "n_samples": report.samples.len(),
            "oracle_mean": report.oracle.mean(),
            "mean_err": e.mean_err,
            "mean_z": e.mean_z,
            "cov_err": e.cov_err,
            "cov_rel_err": e.cov_rel_err,
            "weight_err": e.weight_err,
            "sample_weights": e.sample_weights,
            "oracle_weights": report.oracle.weights,
        }),
    )?;
    Ok(report)
}

/// Plain-text table of oracle vs sample moments.
pub fn oracle_table(report: &OracleReport) -> String {
    let o = &report.oracle;
    let e = &report.errors;
    let n = report.samples.len() as f64;
    let d = o.dim();
    let mut mean = vec![0.0; d];
    for s in &report.samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let om = o.mean();
    let mut lines = vec![format!("{:<12}{:>14}{:>14}{:>10}", "quantity", "oracle", "samples", "z")];
    for i in 0..d.min(8) {
        lines.push(format!("{:<12}{:>14.6}{:>14.6}{:>10.3}", format!("mean[{i}]"), om[i], mean[i], e.mean_z[i]));
    }
    for (k, (w, sw)) in o.weights.iter().zip(&e.sample_weights).enumerate() {
        lines.push(format!("{:<12}{:>14.6}{:>14.6}", format!("weight[{k}]"), w, sw));
    }
    lines.push(format!("covariance relative Frobenius error {:.4}", e.cov_rel_err));
    lines.push(format!("largest weight error {:.4}", e.weight_err));
    lines.join("\n")
}
