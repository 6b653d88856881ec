//! Config-driven pipelines: simulation suite, toy OOD comparison and theory
//! checks, with their on-disk artifacts.
//!
//! Repeat `r` uses seed `seed + r`. Runs are spread over worker threads but
//! results are always collected and written in (repeat, mode) order, so the
//! outputs do not depend on the number of workers.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{LacimError, Result};
use crate::evaluation::{accuracy, evaluate_identifiability, IdentifiabilityReport};
use crate::inference::{predict_batch, InferConfig};
use crate::model::{dims_for, train, train_erm_baseline, Architecture, LacimModel, TrainConfig, TrainMode};
use crate::numeric::rng::{purpose, RngStream};
use crate::scm::toy::{build_toy_spurious, ToyConfig};
use crate::scm::{build_scm_with, format_f64, ScmDims, ScmOptions, Targets};
use crate::theory::{
    check_nonempty_open_set, check_scm_diversity, gaussian_sufficient_stats, ood_bound_check, random_ood_pair,
    stein_kernel, GaussianMixture, OodOutcome, TheoryReport, GRID_POINTS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScmSection {
    pub dims: ScmDims,
    /// Environments of the reference LaCIM run and of the pooled baseline.
    pub m: usize,
    pub samples_per_env: usize,
    pub options: ScmOptions,
    /// Environment counts trained with per-environment models.
    pub env_counts: Vec<usize>,
    /// Keep `m · samples_per_env` total samples when `env_counts` differ from `m`.
    pub fixed_total: bool,
}

impl Default for ScmSection {
    fn default() -> Self {
        Self {
            dims: ScmDims::default(),
            m: 5,
            samples_per_env: 1000,
            options: ScmOptions::default(),
            env_counts: vec![5, 3],
            fixed_total: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeFlags {
    pub lacim: bool,
    pub pooled: bool,
    pub erm: bool,
    pub toy: bool,
}

impl Default for ModeFlags {
    fn default() -> Self {
        Self {
            lacim: true,
            pooled: true,
            erm: true,
            toy: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    pub data: ToyConfig,
    pub train_strengths: Vec<f64>,
    pub test_strength: f64,
    pub q_s: usize,
    pub q_z: usize,
    pub erm_hidden: usize,
    pub train: TrainConfig,
}

impl Default for ToySection {
    fn default() -> Self {
        Self {
            data: ToyConfig::default(),
            train_strengths: vec![0.95, 0.99],
            test_strength: 0.1,
            q_s: 2,
            q_z: 2,
            erm_hidden: 64,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    pub c_grid_points: usize,
    pub stein_densities: usize,
    pub ood_pairs: usize,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self {
            c_grid_points: 8,
            stein_densities: 10,
            ood_pairs: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_repeats: usize,
    /// Worker threads for repeats; 0 picks the available parallelism.
    pub workers: usize,
    pub out_dir: Option<String>,
    pub scm: ScmSection,
    pub arch: Architecture,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub modes: ModeFlags,
    pub toy: ToySection,
    pub theory: TheorySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_repeats: 5,
            workers: 0,
            out_dir: None,
            scm: ScmSection::default(),
            arch: Architecture::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            modes: ModeFlags::default(),
            toy: ToySection::default(),
            theory: TheorySection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| LacimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LacimError::Config(msg));
        if self.n_repeats == 0 {
            return bad("n_repeats must be at least 1".into());
        }
        self.scm.dims.validate().map_err(|e| LacimError::Config(e.to_string()))?;
        if self.scm.m == 0 || self.scm.env_counts.contains(&0) {
            return bad("environment counts must be positive".into());
        }
        if self.scm.samples_per_env < 3 {
            return bad("samples_per_env must be at least 3".into());
        }
        self.train.validate()?;
        self.toy.train.validate()?;
        self.infer.validate()?;
        if self.toy.train_strengths.len() < 2 {
            return bad("toy.train_strengths needs at least two environments".into());
        }
        if self.toy.q_s + self.toy.q_z > self.toy.data.q_x {
            return bad("toy latent dimensions exceed q_x".into());
        }
        if self.theory.c_grid_points == 0 {
            return bad("theory.c_grid_points must be positive".into());
        }
        Ok(())
    }

    pub fn repeat_seed(&self, repeat: usize) -> u64 {
        self.seed.wrapping_add(repeat as u64)
    }

    fn worker_count(&self) -> usize {
        match self.workers {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

/// Runs `f` on every job across `workers` threads; output keeps job order.
fn run_jobs<J: Sync, T: Send>(jobs: &[J], workers: usize, f: impl Fn(&J) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let out = f(&jobs[i]);
                slots.lock().expect("result slots")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|s| s.expect("every job ran"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub mode: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Sample mean and standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

pub fn write_aggregate_csv(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mode", "metric", "mean", "std", "n"])?;
    for r in rows {
        w.write_record([
            r.mode.clone(),
            r.metric.clone(),
            format_f64(r.mean),
            format_f64(r.std),
            r.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Writes `config.json` next to the outputs so that CSV files, which cannot
/// carry it inline, are still reproducible.
pub fn write_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    write_json(&out.join("config.json"), &json!({ "config": cfg, "seed": cfg.seed }))
}

/// One suite run of one mode in one repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRecord {
    pub repeat: usize,
    pub seed: u64,
    pub mode: String,
    pub environments: usize,
    pub samples_per_env: usize,
    pub final_loss: Option<f64>,
    pub report: Option<IdentifiabilityReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub records: Vec<SuiteRecord>,
    pub aggregate: Vec<AggregateRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum SuiteMode {
    Lacim(usize),
    Pooled,
}

impl SuiteMode {
    fn name(self) -> String {
        match self {
            SuiteMode::Lacim(m) => format!("lacim_m{m}"),
            SuiteMode::Pooled => "pooled".into(),
        }
    }
}

fn suite_modes(cfg: &ExperimentConfig) -> Vec<SuiteMode> {
    let mut modes = Vec::new();
    if cfg.modes.lacim {
        modes.extend(cfg.scm.env_counts.iter().map(|&m| SuiteMode::Lacim(m)));
    }
    if cfg.modes.pooled {
        modes.push(SuiteMode::Pooled);
    }
    modes
}

/// Samples per environment when the data is split over `m` environments.
pub fn samples_for(cfg: &ExperimentConfig, m: usize) -> usize {
    if cfg.scm.fixed_total {
        cfg.scm.m * cfg.scm.samples_per_env / m
    } else {
        cfg.scm.samples_per_env
    }
}

/// Trains one model on freshly simulated data and scores its latents.
pub fn run_identifiability(
    cfg: &ExperimentConfig,
    seed: u64,
    m: usize,
    n_per_env: usize,
    mode: TrainMode,
) -> Result<(LacimModel, f64, IdentifiabilityReport)> {
    let scm = build_scm_with(seed, cfg.scm.dims, m, cfg.scm.options)?;
    let data = scm.sample_all(n_per_env, seed)?;
    let model_m = if mode == TrainMode::Pooled { 1 } else { m };
    let dims = dims_for(&data, cfg.scm.dims.q_s, cfg.scm.dims.q_z, model_m)?;
    let mut model = LacimModel::new(dims, cfg.arch, seed)?;
    let tcfg = TrainConfig {
        seed,
        mode,
        ..cfg.train.clone()
    };
    let rep = train(&mut model, &data, &tcfg)?;
    let report = evaluate_identifiability(&model, &data)?;
    let last = rep.losses.last().copied().unwrap_or(f64::NAN);
    Ok((model, last, report))
}

/// Every repeat × mode of the simulation study. Stage failures are recorded
/// in the run's record and the suite carries on.
pub fn run_simulation_suite(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<SuiteResult> {
    cfg.validate()?;
    let modes = suite_modes(cfg);
    let jobs: Vec<(usize, SuiteMode)> = (0..cfg.n_repeats)
        .flat_map(|r| modes.iter().map(move |&m| (r, m)))
        .collect();
    let records = run_jobs(&jobs, cfg.worker_count(), |&(repeat, mode)| {
        let seed = cfg.repeat_seed(repeat);
        let (m, train_mode) = match mode {
            SuiteMode::Lacim(m) => (m, TrainMode::Lacim),
            SuiteMode::Pooled => (cfg.scm.m, TrainMode::Pooled),
        };
        let n = samples_for(cfg, m);
        let outcome = run_identifiability(cfg, seed, m, n, train_mode);
        let (final_loss, report, error) = match outcome {
            Ok((_, loss, rep)) => (Some(loss), Some(rep), None),
            Err(e) => (None, None, Some(e.to_string())),
        };
        SuiteRecord {
            repeat,
            seed,
            mode: mode.name(),
            environments: m,
            samples_per_env: n,
            final_loss,
            report,
            error,
        }
    });

    let mut aggregate = Vec::new();
    for mode in &modes {
        let reports: Vec<&IdentifiabilityReport> = records
            .iter()
            .filter(|r| r.mode == mode.name())
            .filter_map(|r| r.report.as_ref())
            .collect();
        for (metric, pick) in [
            ("mcc_s", (|r: &IdentifiabilityReport| r.pooled.mcc_s) as fn(&IdentifiabilityReport) -> f64),
            ("mcc_z", |r| r.pooled.mcc_z),
        ] {
            let vals: Vec<f64> = reports.iter().map(|r| pick(r)).collect();
            let (mean, std) = mean_std(&vals);
            aggregate.push(AggregateRow {
                mode: mode.name(),
                metric: metric.into(),
                mean,
                std,
                n: vals.len(),
            });
        }
    }
    let result = SuiteResult { records, aggregate };

    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_config(cfg, out)?;
        for rec in &result.records {
            let path = out.join("runs").join(format!("{}_r{}.json", rec.mode, rec.repeat));
            write_json(&path, &json!({ "config": cfg, "seed": rec.seed, "run": rec }))?;
        }
        write_json(
            &out.join("mcc.json"),
            &json!({ "config": cfg, "seed": cfg.seed, "aggregate": result.aggregate }),
        )?;
        write_aggregate_csv(&result.aggregate, &out.join("aggregate.csv"))?;
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRecord {
    pub repeat: usize,
    pub seed: u64,
    pub lacim_accuracy: Option<f64>,
    pub erm_accuracy: Option<f64>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyResult {
    pub records: Vec<ToyRecord>,
    pub aggregate: Vec<AggregateRow>,
}

/// LaCIM (with test-time latent inference) against the ERM baseline on the
/// spurious-correlation preset, both scored on the shifted test split.
pub fn toy_once(cfg: &ExperimentConfig, seed: u64) -> (Result<f64>, Result<f64>) {
    let toy = &cfg.toy;
    let built = build_toy_spurious(seed, &toy.train_strengths, toy.test_strength, &toy.data);
    let (train_sets, test) = match built {
        Ok(v) => v,
        Err(e) => {
            let msg = e.to_string();
            return (Err(LacimError::InvalidArgument(msg.clone())), Err(LacimError::InvalidArgument(msg)));
        }
    };
    let labels = match &test.y {
        Targets::Labels(l) => l.clone(),
        Targets::Continuous(_) => unreachable!("toy targets are labels"),
    };
    let tcfg = TrainConfig { seed, ..toy.train.clone() };

    let lacim = (|| {
        let dims = dims_for(&train_sets, toy.q_s, toy.q_z, train_sets.len())?;
        let mut model = LacimModel::new(dims, cfg.arch, seed)?;
        train(&mut model, &train_sets, &TrainConfig { mode: TrainMode::Lacim, ..tcfg.clone() })?;
        let icfg = InferConfig {
            seed: seed.wrapping_add(purpose::INFER),
            ..cfg.infer.clone()
        };
        let pred = predict_batch(&model, &test.x, &icfg)?;
        match pred.predictions {
            Targets::Labels(p) => accuracy(&p, &labels),
            Targets::Continuous(_) => Err(LacimError::InvalidArgument("classifier returned continuous output".into())),
        }
    })();

    let erm = (|| {
        let (model, _) = train_erm_baseline(&train_sets, &TrainConfig { mode: TrainMode::Erm, ..tcfg.clone() }, toy.erm_hidden)?;
        match model.predict(&test.x)? {
            Targets::Labels(p) => accuracy(&p, &labels),
            Targets::Continuous(_) => Err(LacimError::InvalidArgument("baseline returned continuous output".into())),
        }
    })();
    (lacim, erm)
}

pub fn run_toy_ood(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ToyResult> {
    cfg.validate()?;
    let jobs: Vec<usize> = (0..cfg.n_repeats).collect();
    let records = run_jobs(&jobs, cfg.worker_count(), |&repeat| {
        let seed = cfg.repeat_seed(repeat);
        let (lacim, erm) = toy_once(cfg, seed);
        let mut errors = Vec::new();
        let mut keep = |r: Result<f64>, tag: &str| match r {
            Ok(v) => Some(v),
            Err(e) => {
                errors.push(format!("{tag}: {e}"));
                None
            }
        };
        let lacim_accuracy = if cfg.modes.lacim { keep(lacim, "lacim") } else { None };
        let erm_accuracy = if cfg.modes.erm { keep(erm, "erm") } else { None };
        ToyRecord {
            repeat,
            seed,
            lacim_accuracy,
            erm_accuracy,
            errors,
        }
    });
    let mut aggregate = Vec::new();
    for (mode, pick) in [
        ("lacim", (|r: &ToyRecord| r.lacim_accuracy) as fn(&ToyRecord) -> Option<f64>),
        ("erm", |r| r.erm_accuracy),
    ] {
        let vals: Vec<f64> = records.iter().filter_map(pick).collect();
        let (mean, std) = mean_std(&vals);
        aggregate.push(AggregateRow {
            mode: mode.into(),
            metric: "test_accuracy".into(),
            mean,
            std,
            n: vals.len(),
        });
    }
    let result = ToyResult { records, aggregate };
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_config(cfg, out)?;
        write_json(
            &out.join("toy_ood.json"),
            &json!({ "config": cfg, "seed": cfg.seed, "runs": result.records, "aggregate": result.aggregate }),
        )?;
        write_aggregate_csv(&result.aggregate, &out.join("aggregate.csv"))?;
    }
    Ok(result)
}

/// Stein identity `E[τ] = Var` on random mixtures plus `τ ≡ 1` for N(0, 1).
pub fn stein_check(densities: usize, seed: u64) -> Result<TheoryReport> {
    let normal = stein_kernel(|x| (-0.5 * x * x).exp(), -8.0, 8.0, GRID_POINTS)?;
    let normal_err = normal
        .grid
        .iter()
        .zip(&normal.tau)
        .filter(|(x, _)| x.abs() <= 3.0)
        .map(|(_, t)| (t - 1.0).abs())
        .fold(0.0, f64::max);
    let mut rng = RngStream::for_purpose(seed, purpose::THEORY, 1);
    let mut worst_identity: f64 = 0.0;
    let mut min_tau = f64::INFINITY;
    for _ in 0..densities {
        let mix = GaussianMixture::random(&mut rng);
        let (lo, hi) = mix.support();
        let k = stein_kernel(|x| mix.pdf(x), lo, hi, GRID_POINTS)?;
        worst_identity = worst_identity.max((k.expected_tau() - k.variance).abs() / k.variance);
        for (i, t) in k.tau.iter().enumerate() {
            if k.reliable(i) {
                min_tau = min_tau.min(*t);
            }
        }
    }
    let tol = 1e-4;
    Ok(TheoryReport {
        check: "stein".into(),
        pass: normal_err < tol && worst_identity < tol && min_tau > -1e-9,
        margin: tol - normal_err.max(worst_identity),
        details: json!({
            "standard_normal_max_error": normal_err,
            "densities": densities,
            "max_relative_identity_error": worst_identity,
            "min_reliable_tau": min_tau,
        }),
    })
}

/// The posterior-shift bound on `pairs` random applicable Gaussian pairs.
pub fn ood_check(pairs: usize, seed: u64) -> Result<TheoryReport> {
    let mut rng = RngStream::for_purpose(seed, purpose::THEORY, 2);
    let tol = 1e-6;
    let mut min_slack = f64::INFINITY;
    let mut violations = 0;
    let mut checked = 0;
    for k in 0..pairs {
        let pair = random_ood_pair(&mut rng);
        // Alternate between a bounded nonlinearity and a scaled sine.
        let outcome = if k % 2 == 0 {
            ood_bound_check(&pair, f64::tanh)?
        } else {
            ood_bound_check(&pair, |s| 0.5 * (2.0 * s).sin())?
        };
        if let OodOutcome::Applicable(b) = outcome {
            checked += 1;
            min_slack = min_slack.min(b.slack);
            if !b.holds(tol) {
                violations += 1;
            }
        }
    }
    Ok(TheoryReport {
        check: "ood_bound".into(),
        pass: violations == 0 && checked == pairs,
        margin: min_slack + tol,
        details: json!({ "pairs": pairs, "applicable": checked, "violations": violations, "min_slack": min_slack }),
    })
}

/// All theory checks on the configured simulator.
pub fn run_theory_checks(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<TheoryReport>> {
    cfg.validate()?;
    let seed = cfg.seed;
    let scm = build_scm_with(seed, cfg.scm.dims, cfg.scm.m, cfg.scm.options)?;
    let mut reports = vec![check_scm_diversity(&scm, cfg.theory.c_grid_points, seed)?];
    reports.push(stein_check(cfg.theory.stein_densities, seed)?);
    reports.push(ood_check(cfg.theory.ood_pairs, seed)?);
    let data = scm.sample_all(cfg.scm.samples_per_env, seed)?;
    let parts: Vec<&crate::scm::EnvDataset> = data.iter().collect();
    let pooled = crate::scm::EnvDataset::concat(1, &parts)?;
    let lat = pooled.latents.as_ref().ok_or_else(|| LacimError::MissingLatents("simulated data".into()))?;
    let sz = crate::numeric::Matrix::hstack(&[&lat.s, &lat.z])?;
    reports.push(check_nonempty_open_set(&gaussian_sufficient_stats(&sz))?);
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_json(&out.join("theory.json"), &json!({ "config": cfg, "seed": seed, "reports": reports }))?;
    }
    Ok(reports)
}
