//! Configuration-driven experiment runner behind the `proxdm` binary.
//!
//! A run reads a JSON [`RunConfig`], executes one [`Command`] against the
//! matching payload and writes CSV artifacts plus `config.json` (the echo)
//! and `manifest.json` (a [`ResultsBundle`]) into the output directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datasets::{self, POINT_CLOUD_VARIANCE};
use crate::error::{FormatError, MetricsError, SamplerError, TheoryError, TrainError};
use crate::io::{self, FailureRow, ResultRow};
use crate::metrics::{
    empirical_moments, fit_convergence, gaussian_kl, pushforward_exact, wasserstein2,
    AffineGaussianState, MAX_EXACT_W2,
};
use crate::oracle::GaussianMixture;
use crate::prox_match::{
    eval_against_oracle, read_checkpoint, train, write_checkpoint, CandidateWeighting, PMModel,
    Phase, SchemeMethod, TLambdaScheme, TrainConfig, DEFAULT_CANDIDATES, DEFAULT_HIDDEN,
};
use crate::rng::{self, Domain};
use crate::samplers::{run_sampler, ExactOracle, Method, Oracle, SamplerConfig, SamplerTrace};
use crate::schedule::{ScheduleSpec, TimeGrid};
use crate::theory::{run_checks, TheoryFixture, DEFAULT_PROBES};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl HarnessError {
    /// 2 for configuration and input problems, 3 for numeric or solver failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Io { .. } => 2,
            HarnessError::Numeric(_) => 3,
        }
    }
}

fn config_err(path: &str, msg: impl fmt::Display) -> HarnessError {
    HarnessError::Config(format!("{path}: {msg}"))
}

fn io_err(path: &Path, e: impl fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn format_err(path: &Path, e: FormatError) -> HarnessError {
    io_err(path, e)
}

fn sampler_err(path: &str, e: SamplerError) -> HarnessError {
    match e {
        SamplerError::Config(_) | SamplerError::Schedule(_) => config_err(path, e),
        SamplerError::StepSize { .. } | SamplerError::Oracle { .. } => {
            HarnessError::Numeric(format!("{path}: {e}"))
        }
    }
}

fn train_err(path: &str, e: TrainError) -> HarnessError {
    match e {
        TrainError::Config(_) | TrainError::Schedule(_) => config_err(path, e),
        TrainError::NonFinite { .. } | TrainError::Oracle(_) => {
            HarnessError::Numeric(format!("{path}: {e}"))
        }
    }
}

fn metrics_err(path: &str, e: MetricsError) -> HarnessError {
    HarnessError::Numeric(format!("{path}: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Sample,
    Sweep,
    KlSweep,
    TrainPm,
    EvalPm,
    CheckTheory,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Sample,
        Command::Sweep,
        Command::KlSweep,
        Command::TrainPm,
        Command::EvalPm,
        Command::CheckTheory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Sample => "sample",
            Command::Sweep => "sweep",
            Command::KlSweep => "kl-sweep",
            Command::TrainPm => "train-pm",
            Command::EvalPm => "eval-pm",
            Command::CheckTheory => "check-theory",
        }
    }

    /// Key of the payload in the config file.
    pub fn config_key(self) -> &'static str {
        match self {
            Command::Sample => "sample",
            Command::Sweep => "sweep",
            Command::KlSweep => "kl_sweep",
            Command::TrainPm => "train_pm",
            Command::EvalPm => "eval_pm",
            Command::CheckTheory => "check_theory",
        }
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown command {s:?}"))
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinTarget {
    Gmm8,
    Face,
}

/// Data distribution `p_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    Gaussian {
        mean: Vec<f64>,
        variance: f64,
    },
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<f64>,
    },
    Builtin {
        name: BuiltinTarget,
    },
    /// CSV of `d`-column rows, smoothed into a point-cloud mixture.
    Dataset {
        path: PathBuf,
        #[serde(default = "default_cloud_variance")]
        variance: f64,
    },
}

fn default_cloud_variance() -> f64 {
    POINT_CLOUD_VARIANCE
}

/// A resolved target: the mixture, and the raw rows for datasets.
struct Target {
    gm: GaussianMixture,
    points: Option<Array2<f64>>,
}

impl TargetSpec {
    fn resolve(&self, path: &str, inputs: &mut Vec<PathBuf>) -> Result<Target, HarnessError> {
        let bad = |e: &dyn fmt::Display| config_err(path, e);
        Ok(match self {
            TargetSpec::Gaussian { mean, variance } => Target {
                gm: GaussianMixture::gaussian(mean.clone(), *variance).map_err(|e| bad(&e))?,
                points: None,
            },
            TargetSpec::Mixture {
                weights,
                means,
                variances,
            } => Target {
                gm: GaussianMixture::new(weights.clone(), means.clone(), variances.clone())
                    .map_err(|e| bad(&e))?,
                points: None,
            },
            TargetSpec::Builtin { name } => match name {
                BuiltinTarget::Gmm8 => Target {
                    gm: datasets::eight_mode_gmm(),
                    points: None,
                },
                BuiltinTarget::Face => Target {
                    gm: datasets::face_point_cloud(),
                    points: Some(datasets::face_points()),
                },
            },
            TargetSpec::Dataset { path: file, variance } => {
                let pts = datasets::read_points_csv(file)
                    .map_err(|e| config_err(&format!("{path}.path"), e))?;
                inputs.push(file.clone());
                Target {
                    gm: GaussianMixture::point_cloud(&pts, *variance).map_err(|e| bad(&e))?,
                    points: Some(pts),
                }
            }
        })
    }

    fn resolve_paths(&mut self, base: &Path, path: &str) -> Result<(), HarnessError> {
        if let TargetSpec::Dataset { path: file, .. } = self {
            *file = resolve_file(base, file, &format!("{path}.path"))?;
        }
        Ok(())
    }
}

fn resolve_file(base: &Path, file: &Path, path: &str) -> Result<PathBuf, HarnessError> {
    let joined = if file.is_absolute() {
        file.to_path_buf()
    } else {
        base.join(file)
    };
    fs::canonicalize(&joined)
        .map_err(|e| config_err(path, format!("{}: {e}", joined.display())))
}

/// Reference set for the W2 report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// Fresh i.i.d. target draws, as many as there are chains.
    #[default]
    Fresh,
    /// Every component mean repeated `chains / K` times; needs equal weights
    /// and `K | chains`. The exact target for point-cloud datasets.
    Atoms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    #[default]
    None,
    Csv,
    Binary,
    Both,
}

/// Source of scores and proximal maps for `sample`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleChoice {
    #[default]
    Exact,
    /// A proximal-matching checkpoint; proximal methods only.
    Learned { checkpoint: PathBuf },
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub method: Method,
    pub target: TargetSpec,
    pub schedule: ScheduleSpec,
    pub steps: usize,
    pub chains: usize,
    #[serde(default)]
    pub oracle: OracleChoice,
    #[serde(default = "yes")]
    pub w2: bool,
    #[serde(default)]
    pub reference: ReferenceKind,
    #[serde(default)]
    pub trace: TraceFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub steps: Vec<usize>,
    pub target: TargetSpec,
    pub schedule: ScheduleSpec,
    pub chains: usize,
    #[serde(default)]
    pub reference: ReferenceKind,
    /// Independent runs per cell; replicate `r` uses seed `seed + r`.
    #[serde(default = "one")]
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlSweepConfig {
    pub mean: Vec<f64>,
    pub variance: f64,
    pub schedule: ScheduleSpec,
    pub methods: Vec<Method>,
    pub steps: Vec<usize>,
    #[serde(default = "yes")]
    pub subtract_floor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub method: SchemeMethod,
    #[serde(default = "default_candidates")]
    pub candidates: Vec<usize>,
    #[serde(default)]
    pub weighting: CandidateWeighting,
}

fn default_candidates() -> Vec<usize> {
    DEFAULT_CANDIDATES.to_vec()
}

impl SchemeConfig {
    fn build(&self, schedule: ScheduleSpec, path: &str) -> Result<TLambdaScheme, HarnessError> {
        TLambdaScheme::new(schedule, self.method, &self.candidates, self.weighting)
            .map_err(|e| train_err(path, e))
    }
}

/// [`TrainConfig`] minus the seed, which comes from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub phases: Vec<Phase>,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn default_momentum() -> f64 {
    0.9
}

impl TrainSettings {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            phases: self.phases.clone(),
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            seed,
        }
    }
}

/// Learned-versus-exact sampling comparison after training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub method: Method,
    pub steps: usize,
    pub chains: usize,
}

fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}

fn default_probes() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPmConfig {
    pub target: TargetSpec,
    /// Training rows drawn from a distribution target; datasets use their rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_size: Option<usize>,
    pub schedule: ScheduleSpec,
    pub scheme: SchemeConfig,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub train: TrainSettings,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPmConfig {
    pub checkpoint: PathBuf,
    pub target: TargetSpec,
    pub schedule: ScheduleSpec,
    pub scheme: SchemeConfig,
    #[serde(default = "default_probes")]
    pub probes: usize,
}

fn default_fixtures() -> Vec<String> {
    ["stationary", "shifted", "gmm8"].map(String::from).to_vec()
}

fn default_theory_probes() -> usize {
    DEFAULT_PROBES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckTheoryConfig {
    #[serde(default = "default_fixtures")]
    pub fixtures: Vec<String>,
    #[serde(default = "default_theory_probes")]
    pub probes: usize,
    /// Overrides the step count the fixture derives from `L`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

/// One file may carry payloads for several commands; a run uses one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_sweep: Option<KlSweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_pm: Option<TrainPmConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_pm: Option<EvalPmConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check_theory: Option<CheckTheoryConfig>,
}

impl RunConfig {
    /// Parses JSON; errors carry the path of the offending field.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(if path == "." { "config" } else { &path }, e.into_inner())
        })
    }

    /// Reads a config file and makes the input paths of `command`'s payload
    /// absolute, relative paths being taken from the file's directory.
    pub fn load(path: &Path, command: Command) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(&path.display().to_string(), e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(command, base)?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, command: Command, base: &Path) -> Result<(), HarnessError> {
        match command {
            Command::Sample => {
                if let Some(c) = &mut self.sample {
                    c.target.resolve_paths(base, "sample.target")?;
                    if let OracleChoice::Learned { checkpoint } = &mut c.oracle {
                        *checkpoint = resolve_file(base, checkpoint, "sample.oracle.checkpoint")?;
                    }
                }
            }
            Command::Sweep => {
                if let Some(c) = &mut self.sweep {
                    c.target.resolve_paths(base, "sweep.target")?;
                }
            }
            Command::TrainPm => {
                if let Some(c) = &mut self.train_pm {
                    c.target.resolve_paths(base, "train_pm.target")?;
                }
            }
            Command::EvalPm => {
                if let Some(c) = &mut self.eval_pm {
                    c.target.resolve_paths(base, "eval_pm.target")?;
                    c.checkpoint = resolve_file(base, &c.checkpoint, "eval_pm.checkpoint")?;
                }
            }
            Command::KlSweep | Command::CheckTheory => {}
        }
        Ok(())
    }

    /// Pretty JSON with a trailing newline; parses back to `self`.
    pub fn echo(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

// ---------------------------------------------------------------------------
// Bundle

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsBundle {
    pub run_id: String,
    pub command: String,
    pub config: RunConfig,
    /// SHA-256 over the config echo and every input file, each hashed as
    /// `blob <len>\0<bytes>`.
    pub input_hash: String,
    /// Every file written besides the manifest, relative to the output dir.
    pub artifacts: Vec<Artifact>,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
    inputs: Vec<PathBuf>,
}

impl Outputs {
    fn file(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn blob(h: &mut Sha256, bytes: &[u8]) {
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
}

/// Runs `command` on `cfg`, writing into `out` (created if missing).
pub fn run(command: Command, cfg: &RunConfig, out: &Path) -> Result<ResultsBundle, HarnessError> {
    let missing = || config_err(command.config_key(), "payload missing from config");
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut o = Outputs {
        dir: out.to_path_buf(),
        files: Vec::new(),
        inputs: Vec::new(),
    };
    let seed = cfg.seed;
    match command {
        Command::Sample => cmd_sample(cfg.sample.as_ref().ok_or_else(missing)?, seed, &mut o)?,
        Command::Sweep => cmd_sweep(cfg.sweep.as_ref().ok_or_else(missing)?, seed, &mut o)?,
        Command::KlSweep => cmd_kl_sweep(cfg.kl_sweep.as_ref().ok_or_else(missing)?, &mut o)?,
        Command::TrainPm => cmd_train_pm(cfg.train_pm.as_ref().ok_or_else(missing)?, seed, &mut o)?,
        Command::EvalPm => cmd_eval_pm(cfg.eval_pm.as_ref().ok_or_else(missing)?, seed, &mut o)?,
        Command::CheckTheory => {
            cmd_check_theory(cfg.check_theory.as_ref().ok_or_else(missing)?, seed, &mut o)?
        }
    }

    let echo = cfg.echo();
    let echo_path = o.file("config.json");
    fs::write(&echo_path, &echo).map_err(|e| io_err(&echo_path, e))?;

    let mut h = Sha256::new();
    blob(&mut h, echo.as_bytes());
    for p in &o.inputs {
        let bytes = fs::read(p).map_err(|e| io_err(p, e))?;
        blob(&mut h, &bytes);
    }
    let input_hash = hex::encode(h.finalize());
    let mut artifacts = Vec::with_capacity(o.files.len());
    for name in &o.files {
        let p = o.dir.join(name);
        let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
        artifacts.push(Artifact {
            path: name.clone(),
            sha256: sha256_hex(&bytes),
        });
    }
    let bundle = ResultsBundle {
        run_id: format!("{}-{}", command.name(), &input_hash[..12]),
        command: command.name().to_string(),
        config: cfg.clone(),
        input_hash,
        artifacts,
    };
    let manifest = o.dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&bundle).expect("bundle serializes");
    text.push('\n');
    fs::write(&manifest, text).map_err(|e| io_err(&manifest, e))?;
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Shared pieces

/// Independent seeds for auxiliary draws of a run.
fn derived_seed(seed: u64, tag: u64) -> u64 {
    rng::stream(seed, 0, tag, Domain::Reference).random()
}

const TAG_REFERENCE: u64 = 1;
const TAG_DATA: u64 = 2;

fn check_positive(path: &str, v: usize) -> Result<(), HarnessError> {
    if v == 0 {
        Err(config_err(path, "must be positive"))
    } else {
        Ok(())
    }
}

fn check_schedule(path: &str, s: &ScheduleSpec) -> Result<(), HarnessError> {
    s.validate().map_err(|e| config_err(path, e))
}

fn reference_set(
    gm: &GaussianMixture,
    kind: ReferenceKind,
    n: usize,
    seed: u64,
    path: &str,
) -> Result<Array2<f64>, HarnessError> {
    match kind {
        ReferenceKind::Fresh => {
            let mut r = rng::stream(derived_seed(seed, TAG_REFERENCE), 0, 0, Domain::Reference);
            Ok(gm.sample_with(n, &mut r))
        }
        ReferenceKind::Atoms => {
            let k = gm.components();
            let w0 = gm.weights()[0];
            if n % k != 0 || gm.weights().iter().any(|w| (w - w0).abs() > 1e-12) {
                return Err(config_err(
                    path,
                    format!("atoms reference needs equal weights and a chain count divisible by {k}"),
                ));
            }
            let mut out = Array2::zeros((n, gm.dim()));
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                row.assign(&ndarray::ArrayView1::from(gm.mean(i % k)));
            }
            Ok(out)
        }
    }
}

fn check_w2_size(path: &str, chains: usize) -> Result<(), HarnessError> {
    if chains > MAX_EXACT_W2 {
        return Err(config_err(
            path,
            format!("exact W2 supports at most {MAX_EXACT_W2} chains, got {chains}"),
        ));
    }
    Ok(())
}

/// Moment rows (`mean_j`, `var_j`) and an optional `w2` row for one cell.
fn cell_rows(method: &Method, steps: usize, h: f64, moments: &(Vec<f64>, Vec<f64>), w2: Option<f64>) -> Vec<ResultRow> {
    let row = |metric: String, value: f64| ResultRow {
        method: method.name().to_string(),
        steps,
        h,
        metric,
        value,
    };
    let mut rows: Vec<ResultRow> = moments
        .0
        .iter()
        .enumerate()
        .map(|(j, v)| row(format!("mean_{j}"), *v))
        .chain(moments.1.iter().enumerate().map(|(j, v)| row(format!("var_{j}"), *v)))
        .collect();
    if let Some(w) = w2 {
        rows.push(row("w2".into(), w));
    }
    rows
}

fn sample_cell(
    method: Method,
    schedule: ScheduleSpec,
    steps: usize,
    chains: usize,
    seed: u64,
    oracle: &dyn Oracle,
    path: &str,
) -> Result<SamplerTrace, HarnessError> {
    let grid = TimeGrid::uniform(schedule.horizon, steps).map_err(|e| config_err(path, e))?;
    let cfg = SamplerConfig::new(method, schedule, grid, chains, seed).map_err(|e| sampler_err(path, e))?;
    run_sampler(&cfg, oracle).map_err(|e| sampler_err(path, e))
}

fn moments_of(samples: &Array2<f64>, path: &str) -> Result<(Vec<f64>, Vec<f64>), HarnessError> {
    if samples.nrows() < 2 {
        return Ok((
            samples.row(0).to_vec(),
            vec![0.0; samples.ncols()],
        ));
    }
    empirical_moments(samples).map_err(|e| metrics_err(path, e))
}

fn w2_of(samples: &Array2<f64>, reference: &Array2<f64>, path: &str) -> Result<f64, HarnessError> {
    Ok(wasserstein2(samples, reference).map_err(|e| metrics_err(path, e))?.value)
}

fn write_results(o: &mut Outputs, name: &str, rows: &[ResultRow]) -> Result<(), HarnessError> {
    let p = o.file(name);
    io::write_results_csv(&p, rows).map_err(|e| format_err(&p, e))
}

// ---------------------------------------------------------------------------
// Commands

fn cmd_sample(c: &SampleConfig, seed: u64, o: &mut Outputs) -> Result<(), HarnessError> {
    check_positive("sample.steps", c.steps)?;
    check_positive("sample.chains", c.chains)?;
    check_schedule("sample.schedule", &c.schedule)?;
    if c.w2 {
        check_w2_size("sample.chains", c.chains)?;
    }
    let target = c.target.resolve("sample.target", &mut o.inputs)?;
    let reference = if c.w2 {
        Some(reference_set(&target.gm, c.reference, c.chains, seed, "sample.reference")?)
    } else {
        None
    };

    let trace = match &c.oracle {
        OracleChoice::Exact => {
            let oracle = ExactOracle::for_method(target.gm.clone(), c.schedule, &c.method);
            sample_cell(c.method, c.schedule, c.steps, c.chains, seed, &oracle, "sample")?
        }
        OracleChoice::Learned { checkpoint } => {
            let model = load_model(checkpoint, "sample.oracle.checkpoint", &mut o.inputs)?;
            check_model(&model, &target.gm, &c.schedule, "sample.oracle")?;
            if c.method.uses_score() || c.method.is_variance_exploding() {
                return Err(config_err(
                    "sample.method",
                    format!("{} cannot run on a learned VP proximal operator", c.method.name()),
                ));
            }
            sample_cell(c.method, c.schedule, c.steps, c.chains, seed, &model, "sample")?
        }
    };

    let samples = trace.output_matrix();
    let h = c.schedule.horizon / c.steps as f64;
    let moments = moments_of(&samples, "sample")?;
    let w2 = reference.map(|r| w2_of(&samples, &r, "sample.w2")).transpose()?;

    let p = o.file("samples.csv");
    io::write_samples_csv(&p, &samples).map_err(|e| format_err(&p, e))?;
    write_results(o, "results.csv", &cell_rows(&c.method, c.steps, h, &moments, w2))?;
    if matches!(c.trace, TraceFormat::Csv | TraceFormat::Both) {
        let p = o.file("trace.csv");
        io::write_trace_csv(&p, &trace).map_err(|e| format_err(&p, e))?;
    }
    if matches!(c.trace, TraceFormat::Binary | TraceFormat::Both) {
        let p = o.file("trace.pdmt");
        io::write_trace_binary_file(&p, &trace).map_err(|e| format_err(&p, e))?;
    }
    Ok(())
}

fn check_lists(path: &str, methods: &[Method], steps: &[usize]) -> Result<(), HarnessError> {
    if methods.is_empty() {
        return Err(config_err(&format!("{path}.methods"), "must not be empty"));
    }
    if steps.is_empty() {
        return Err(config_err(&format!("{path}.steps"), "must not be empty"));
    }
    if let Some(i) = steps.iter().position(|&n| n == 0) {
        return Err(config_err(&format!("{path}.steps[{i}]"), "must be positive"));
    }
    Ok(())
}

fn cmd_sweep(c: &SweepConfig, seed: u64, o: &mut Outputs) -> Result<(), HarnessError> {
    check_lists("sweep", &c.methods, &c.steps)?;
    check_positive("sweep.chains", c.chains)?;
    check_positive("sweep.replicates", c.replicates)?;
    check_schedule("sweep.schedule", &c.schedule)?;
    check_w2_size("sweep.chains", c.chains)?;
    let target = c.target.resolve("sweep.target", &mut o.inputs)?;
    let references: Vec<Array2<f64>> = (0..c.replicates as u64)
        .map(|r| reference_set(&target.gm, c.reference, c.chains, seed.wrapping_add(r), "sweep.reference"))
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for method in &c.methods {
        let oracle = ExactOracle::for_method(target.gm.clone(), c.schedule, method);
        for &n in &c.steps {
            let path = format!("sweep[{}, N={n}]", method.name());
            let h = c.schedule.horizon / n as f64;
            let cell = (0..c.replicates as u64)
                .map(|r| {
                    let s = seed.wrapping_add(r);
                    let trace = sample_cell(*method, c.schedule, n, c.chains, s, &oracle, &path)?;
                    let samples = trace.output_matrix();
                    Ok((moments_of(&samples, &path)?, w2_of(&samples, &references[r as usize], &path)?))
                })
                .collect::<Result<Vec<_>, HarnessError>>();
            match cell {
                Ok(reps) => {
                    let k = reps.len() as f64;
                    let d = reps[0].0 .0.len();
                    let avg = |f: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>, j: usize| {
                        reps.iter().map(|(m, _)| f(m)[j]).sum::<f64>() / k
                    };
                    let moments = (
                        (0..d).map(|j| avg(&|m| &m.0, j)).collect(),
                        (0..d).map(|j| avg(&|m| &m.1, j)).collect(),
                    );
                    let w2: Vec<f64> = reps.iter().map(|(_, w)| *w).collect();
                    let mean = w2.iter().sum::<f64>() / k;
                    rows.extend(cell_rows(method, n, h, &moments, Some(mean)));
                    if reps.len() > 1 {
                        let sd = (w2.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
                        rows.push(ResultRow {
                            method: method.name().to_string(),
                            steps: n,
                            h,
                            metric: "w2_sd".into(),
                            value: sd,
                        });
                    }
                }
                Err(HarnessError::Io { path, message }) => {
                    return Err(HarnessError::Io { path, message })
                }
                Err(e) => failures.push(FailureRow {
                    method: method.name().to_string(),
                    steps: n,
                    error: e.to_string(),
                }),
            }
        }
    }
    write_results(o, "results.csv", &rows)?;
    if !failures.is_empty() {
        let p = o.file("failures.csv");
        io::write_failures_csv(&p, &failures).map_err(|e| format_err(&p, e))?;
    }
    Ok(())
}

/// KL below this is treated as zero: the sampler sits at a fixed point.
const KL_FIXED_POINT: f64 = 1e-14;

fn cmd_kl_sweep(c: &KlSweepConfig, o: &mut Outputs) -> Result<(), HarnessError> {
    check_lists("kl_sweep", &c.methods, &c.steps)?;
    check_schedule("kl_sweep.schedule", &c.schedule)?;
    let target = GaussianMixture::gaussian(c.mean.clone(), c.variance)
        .map_err(|e| config_err("kl_sweep", e))?;
    let d = target.dim();
    let p0 = AffineGaussianState::new(c.mean.clone(), c.variance);

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut slopes = Vec::new();
    for method in &c.methods {
        let mut points = Vec::new();
        for &n in &c.steps {
            let h = c.schedule.horizon / n as f64;
            let law = TimeGrid::uniform(c.schedule.horizon, n)
                .map_err(MetricsError::from)
                .and_then(|grid| pushforward_exact(method, &c.schedule, &grid, &target));
            match law {
                Ok(q) => {
                    let kl = gaussian_kl(&p0, &q, d);
                    points.push((h, kl));
                    rows.push(ResultRow {
                        method: method.name().to_string(),
                        steps: n,
                        h,
                        metric: "kl".into(),
                        value: kl,
                    });
                }
                Err(e) => failures.push(FailureRow {
                    method: method.name().to_string(),
                    steps: n,
                    error: e.to_string(),
                }),
            }
        }
        let (status, fit) = if points.iter().all(|(_, kl)| *kl <= KL_FIXED_POINT) {
            ("skipped_fixed_point", None)
        } else {
            match fit_convergence(&points, c.subtract_floor) {
                Ok(f) => ("fit", Some(f)),
                Err(_) => ("failed", None),
            }
        };
        let f = |g: fn(&crate::metrics::ConvergenceFit) -> f64| {
            fit.as_ref().map(g).map(io::fmt_f64).unwrap_or_default()
        };
        slopes.push(vec![
            method.name().to_string(),
            points.len().to_string(),
            status.to_string(),
            f(|f| f.slope),
            f(|f| f.intercept),
            f(|f| f.r_squared),
            f(|f| f.floor),
        ]);
    }
    write_results(o, "results.csv", &rows)?;
    let p = o.file("slopes.csv");
    io::write_csv(
        &p,
        &["method", "points", "status", "slope", "intercept", "r_squared", "floor"],
        slopes,
    )
    .map_err(|e| format_err(&p, e))?;
    if !failures.is_empty() {
        let p = o.file("failures.csv");
        io::write_failures_csv(&p, &failures).map_err(|e| format_err(&p, e))?;
    }
    Ok(())
}

fn load_model(path: &Path, field: &str, inputs: &mut Vec<PathBuf>) -> Result<PMModel, HarnessError> {
    let f = fs::File::open(path).map_err(|e| config_err(field, format!("{}: {e}", path.display())))?;
    let model = read_checkpoint(std::io::BufReader::new(f))
        .map_err(|e| config_err(field, format!("{}: {e}", path.display())))?;
    inputs.push(path.to_path_buf());
    Ok(model)
}

fn check_model(model: &PMModel, gm: &GaussianMixture, schedule: &ScheduleSpec, path: &str) -> Result<(), HarnessError> {
    if model.dim() != gm.dim() {
        return Err(config_err(
            path,
            format!("model dimension {} does not match target dimension {}", model.dim(), gm.dim()),
        ));
    }
    if model.horizon() != schedule.horizon {
        return Err(config_err(
            path,
            format!("model horizon {} does not match schedule horizon {}", model.horizon(), schedule.horizon),
        ));
    }
    Ok(())
}

fn check_probes(path: &str, probes: usize) -> Result<(), HarnessError> {
    check_positive(path, probes)
}

fn cmd_train_pm(c: &TrainPmConfig, seed: u64, o: &mut Outputs) -> Result<(), HarnessError> {
    check_schedule("train_pm.schedule", &c.schedule)?;
    check_probes("train_pm.probes", c.probes)?;
    let cfg = c.train.with_seed(seed);
    cfg.validate().map_err(|e| train_err("train_pm.train", e))?;
    let target = c.target.resolve("train_pm.target", &mut o.inputs)?;
    let data = match (&target.points, c.data_size) {
        (Some(_), Some(_)) if matches!(c.target, TargetSpec::Dataset { .. }) => {
            return Err(config_err("train_pm.data_size", "not allowed with a dataset target"))
        }
        (Some(pts), None) => pts.clone(),
        (_, n) => {
            let n = n.unwrap_or(20_000);
            check_positive("train_pm.data_size", n)?;
            let mut r = rng::stream(derived_seed(seed, TAG_DATA), 0, 0, Domain::Reference);
            target.gm.sample_with(n, &mut r)
        }
    };
    if let Some(cmp) = &c.compare {
        check_positive("train_pm.compare.steps", cmp.steps)?;
        check_positive("train_pm.compare.chains", cmp.chains)?;
        check_w2_size("train_pm.compare.chains", cmp.chains)?;
        if !matches!(cmp.method, Method::PdaBackward | Method::PdaHybrid) {
            return Err(config_err("train_pm.compare.method", "must be pda_backward or pda_hybrid"));
        }
    }
    let scheme = c.scheme.build(c.schedule, "train_pm.scheme")?;
    let untrained = PMModel::new(target.gm.dim(), &c.hidden, c.schedule.horizon, seed)
        .map_err(|e| train_err("train_pm.hidden", e))?;

    let baseline = eval_against_oracle(&untrained, &target.gm, &scheme, c.probes, seed)
        .map_err(|e| train_err("train_pm.eval", e))?;
    let outcome = train(untrained, &data, &cfg, &scheme).map_err(|e| train_err("train_pm.train", e))?;
    let trained = eval_against_oracle(&outcome.model, &target.gm, &scheme, c.probes, seed)
        .map_err(|e| train_err("train_pm.eval", e))?;

    let p = o.file("model.pdmm");
    let f = fs::File::create(&p).map_err(|e| io_err(&p, e))?;
    write_checkpoint(&outcome.model, std::io::BufWriter::new(f)).map_err(|e| format_err(&p, e))?;
    let p = o.file("loss_curve.csv");
    io::write_loss_curve_csv(&p, &outcome.curve).map_err(|e| format_err(&p, e))?;
    let p = o.file("oracle_error.csv");
    io::write_oracle_error_csv(&p, &[("untrained", &baseline), ("trained", &trained)])
        .map_err(|e| format_err(&p, e))?;

    if let Some(cmp) = &c.compare {
        let reference = reference_set(&target.gm, ReferenceKind::Fresh, cmp.chains, seed, "train_pm.compare")?;
        let exact = ExactOracle::for_method(target.gm.clone(), c.schedule, &cmp.method);
        let path = "train_pm.compare";
        let xs = sample_cell(cmp.method, c.schedule, cmp.steps, cmp.chains, seed, &exact, path)?;
        let xl = sample_cell(cmp.method, c.schedule, cmp.steps, cmp.chains, seed, &outcome.model, path)?;
        let we = w2_of(&xs.output_matrix(), &reference, path)?;
        let wl = w2_of(&xl.output_matrix(), &reference, path)?;
        let h = c.schedule.horizon / cmp.steps as f64;
        let row = |metric: &str, value: f64| ResultRow {
            method: cmp.method.name().to_string(),
            steps: cmp.steps,
            h,
            metric: metric.to_string(),
            value,
        };
        write_results(
            o,
            "results.csv",
            &[row("w2_exact", we), row("w2_learned", wl), row("w2_ratio", wl / we)],
        )?;
    }
    Ok(())
}

fn cmd_eval_pm(c: &EvalPmConfig, seed: u64, o: &mut Outputs) -> Result<(), HarnessError> {
    check_schedule("eval_pm.schedule", &c.schedule)?;
    check_probes("eval_pm.probes", c.probes)?;
    let model = load_model(&c.checkpoint, "eval_pm.checkpoint", &mut o.inputs)?;
    let target = c.target.resolve("eval_pm.target", &mut o.inputs)?;
    check_model(&model, &target.gm, &c.schedule, "eval_pm")?;
    let scheme = c.scheme.build(c.schedule, "eval_pm.scheme")?;
    let report = eval_against_oracle(&model, &target.gm, &scheme, c.probes, seed)
        .map_err(|e| train_err("eval_pm", e))?;
    let p = o.file("oracle_error.csv");
    io::write_oracle_error_csv(&p, &[("checkpoint", &report)]).map_err(|e| format_err(&p, e))
}

fn theory_err(path: &str, e: TheoryError) -> HarnessError {
    match e {
        TheoryError::InvalidFixture(_) | TheoryError::Schedule(_) => config_err(path, e),
        TheoryError::Oracle(_) => HarnessError::Numeric(format!("{path}: {e}")),
    }
}

fn cmd_check_theory(c: &CheckTheoryConfig, seed: u64, o: &mut Outputs) -> Result<(), HarnessError> {
    if c.fixtures.is_empty() {
        return Err(config_err("check_theory.fixtures", "must not be empty"));
    }
    check_probes("check_theory.probes", c.probes)?;
    if let Some(n) = c.steps {
        check_positive("check_theory.steps", n)?;
    }
    let mut records = Vec::new();
    let mut fixtures = Vec::new();
    for (i, name) in c.fixtures.iter().enumerate() {
        let path = format!("check_theory.fixtures[{i}]");
        let mut fx = TheoryFixture::builtin(name, c.probes, seed).map_err(|e| theory_err(&path, e))?;
        if let Some(n) = c.steps {
            let h = fx.spec.horizon / n as f64;
            fx = fx.with_step(h);
        }
        records.extend(run_checks(&fx).map_err(|e| theory_err(&path, e))?);
        fixtures.push(vec![
            fx.name.clone(),
            fx.dim().to_string(),
            io::fmt_f64(fx.spec.horizon),
            io::fmt_f64(fx.l),
            io::fmt_f64(fx.l_empirical),
            io::fmt_f64(fx.h),
            fx.steps().to_string(),
            io::fmt_f64(fx.m2),
            fx.in_regime().to_string(),
        ]);
    }
    let p = o.file("theory.csv");
    io::write_theory_csv(&p, &records).map_err(|e| format_err(&p, e))?;
    let p = o.file("fixtures.csv");
    io::write_csv(
        &p,
        &["fixture", "dim", "horizon", "l", "l_empirical", "h", "steps", "m2", "in_regime"],
        fixtures,
    )
    .map_err(|e| format_err(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_json() -> &'static str {
        r#"{
            "seed": 3,
            "sample": {
                "method": "pda_hybrid",
                "target": {"kind": "builtin", "name": "face"},
                "schedule": {"beta": {"kind": "linear", "beta_min": 0.1, "beta_max": 20.0}, "horizon": 1.0},
                "steps": 5,
                "chains": 200,
                "reference": "atoms"
            }
        }"#
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_path() {
        let bad = sample_json().replace("\"chains\"", "\"chainz\"");
        let err = RunConfig::parse(&bad).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("sample"), "{err}");
        let top = r#"{"seed": 1, "sampel": {}}"#;
        assert!(RunConfig::parse(top).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::parse(sample_json()).unwrap();
        let back = RunConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.echo(), back.echo());
    }

    #[test]
    fn command_names_round_trip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!("nope".parse::<Command>().is_err());
    }

    #[test]
    fn atoms_reference_needs_divisible_count() {
        let gm = datasets::face_point_cloud();
        assert!(reference_set(&gm, ReferenceKind::Atoms, 250, 0, "r").is_err());
        let r = reference_set(&gm, ReferenceKind::Atoms, 200, 0, "r").unwrap();
        assert_eq!(r.row(105).to_vec(), gm.mean(5).to_vec());
        let g8 = datasets::eight_mode_gmm();
        let f1 = reference_set(&g8, ReferenceKind::Fresh, 16, 4, "r").unwrap();
        let f2 = reference_set(&g8, ReferenceKind::Fresh, 16, 4, "r").unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derived_seed(1, TAG_DATA), derived_seed(1, TAG_REFERENCE));
        assert_eq!(derived_seed(9, TAG_DATA), derived_seed(9, TAG_DATA));
    }
}
