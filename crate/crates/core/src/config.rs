//! Run configuration: defaults, `key=value` config files, and overrides.
//!
//! A config file is plain `key = value` text with `#` comments. Values
//! given on the command line are applied after the file, so flags win.
//! Unknown keys are rejected, and every constraint violation names the
//! offending key.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::{DataSourceSpec, FileSchema, GaussianMixtureSpec};
use crate::error::{Error, Result};
use crate::math::{ScoreKind, ScoreSpec};
use crate::model::Architecture;
use crate::policy::{PolicyKind, PolicySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// One threshold tracker per class at a single learning rate.
    Single,
    /// An ensemble of trackers over a learning-rate grid.
    Experts,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Single => "alg1",
            Algorithm::Experts => "alg2",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreLogMode {
    /// Log true-class scores when the run is short enough to afford it.
    Auto,
    On,
    Off,
}

/// Instance budget below which `auto` score logging stays on.
pub const SCORE_LOG_AUTO_LIMIT: u64 = 1_000_000;

/// Fully resolved configuration of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub alpha: f64,
    pub eta1: f64,
    /// Threshold learning rate for the single-tracker algorithm.
    pub eta2: f64,
    /// Expert learning rates for the ensemble algorithm.
    pub eta2_grid: Vec<f64>,
    pub score: ScoreSpec,
    pub policy: PolicySpec,
    pub data: DataSourceSpec,
    pub arch: Architecture,
    /// Total instances to stream.
    pub t: u64,
    pub batch_size: usize,
    pub replications: usize,
    pub seed: u64,
    pub log_every: u64,
    pub score_log: ScoreLogMode,
    /// Confidence parameter of the coverage-gap bound diagnostic.
    pub delta_conf: f64,
    /// Emit the per-step threshold trace file.
    pub trace: bool,
    /// Emit a parameter snapshot at the end of the run.
    pub snapshot: bool,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Single,
            alpha: 0.05,
            eta1: 1e-4,
            eta2: 0.01,
            eta2_grid: vec![0.1, 0.01, 0.001, 0.0001],
            score: ScoreSpec::raps(0.01, 1),
            policy: PolicySpec::new(PolicyKind::Softmax, 0.0),
            data: DataSourceSpec::Mixture(
                GaussianMixtureSpec::separated(3, 4, 3.0, 1.0).expect("default mixture is valid"),
            ),
            arch: Architecture::Linear,
            t: 10_000,
            batch_size: 256,
            replications: 5,
            seed: 0,
            log_every: 1000,
            score_log: ScoreLogMode::Auto,
            delta_conf: 0.1,
            trace: false,
            snapshot: false,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn classes(&self) -> usize {
        self.data.classes()
    }

    pub fn score_log_enabled(&self) -> bool {
        match self.score_log {
            ScoreLogMode::On => true,
            ScoreLogMode::Off => false,
            ScoreLogMode::Auto => self.t < SCORE_LOG_AUTO_LIMIT,
        }
    }

    /// Canonical description of every semantic field. The seed and output
    /// directory are excluded: the seed is reported separately per run
    /// and the output location does not change what is computed.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("algorithm={};", self.algorithm));
        s.push_str(&format!("alpha={};", self.alpha));
        s.push_str(&format!("eta1={};", self.eta1));
        s.push_str(&format!("eta2={};", self.eta2));
        let grid: Vec<String> = self.eta2_grid.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("eta2_grid={};", grid.join(",")));
        s.push_str(&format!(
            "score={},lambda={},kreg={};",
            score_kind_str(self.score.kind),
            self.score.lambda,
            self.score.k_reg
        ));
        s.push_str(&format!(
            "policy={},floor={};",
            self.policy.kind.as_str(),
            self.policy.floor
        ));
        match &self.data {
            DataSourceSpec::Mixture(spec) => {
                let priors: Vec<String> = spec.priors().iter().map(|v| v.to_string()).collect();
                let means: Vec<String> = spec
                    .means()
                    .iter()
                    .map(|m| {
                        m.iter()
                            .map(|v| v.to_string())
                            .collect::<Vec<_>>()
                            .join(" ")
                    })
                    .collect();
                s.push_str(&format!(
                    "data=gm,priors={},means={},variance={};",
                    priors.join(","),
                    means.join("|"),
                    spec.variance()
                ));
            }
            DataSourceSpec::File { path, schema } => {
                s.push_str(&format!(
                    "data=file:{},d={},k={},header={};",
                    path.display(),
                    schema.dim,
                    schema.classes,
                    schema.has_header
                ));
            }
        }
        match self.arch {
            Architecture::Linear => s.push_str("arch=linear;"),
            Architecture::OneHidden { hidden } => {
                s.push_str(&format!("arch=one-hidden,hidden={hidden};"))
            }
        }
        s.push_str(&format!("t={};", self.t));
        s.push_str(&format!("batch={};", self.batch_size));
        s.push_str(&format!("reps={};", self.replications));
        s.push_str(&format!("log_every={};", self.log_every));
        s.push_str(&format!("score_log={};", self.score_log_enabled()));
        s.push_str(&format!("delta={};", self.delta_conf));
        s.push_str(&format!("trace={};", self.trace));
        s.push_str(&format!("snapshot={};", self.snapshot));
        s
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical_string`].
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(
                "alpha",
                format!("must be in (0, 1), got {}", self.alpha),
            ));
        }
        if !self.eta1.is_finite() || self.eta1 < 0.0 {
            return Err(Error::config(
                "eta1",
                format!("must be a finite nonnegative number, got {}", self.eta1),
            ));
        }
        if !self.eta2.is_finite() || self.eta2 <= 0.0 {
            return Err(Error::config(
                "eta2",
                format!("must be positive, got {}", self.eta2),
            ));
        }
        if self.eta2_grid.is_empty() {
            return Err(Error::config("eta2_grid", "must not be empty"));
        }
        if self.eta2_grid.iter().any(|&v| !v.is_finite() || v <= 0.0) {
            return Err(Error::config("eta2_grid", "rates must be positive"));
        }
        if self.algorithm == Algorithm::Experts && self.eta2_grid.len() < 2 {
            return Err(Error::config(
                "eta2_grid",
                "the expert ensemble needs at least 2 rates",
            ));
        }
        if !self.score.lambda.is_finite() || self.score.lambda < 0.0 {
            return Err(Error::config("lambda", "must be nonnegative"));
        }
        if self.score.k_reg < 1 {
            return Err(Error::config("kreg", "must be at least 1"));
        }
        let classes = self.classes();
        if classes < 2 {
            return Err(Error::config("data", "need at least 2 classes"));
        }
        let max_floor = 1.0 / classes as f64;
        if !(0.0..=max_floor).contains(&self.policy.floor) {
            return Err(Error::config(
                "floor",
                format!(
                    "must be in [0, 1/K] = [0, {max_floor}], got {}",
                    self.policy.floor
                ),
            ));
        }
        if self.policy.kind == PolicyKind::BayesOracle
            && !matches!(self.data, DataSourceSpec::Mixture(_))
        {
            return Err(Error::config(
                "policy",
                "the bayes policy needs the synthetic mixture source",
            ));
        }
        if self.t < 1 {
            return Err(Error::config("t", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if self.replications < 1 {
            return Err(Error::config("reps", "must be at least 1"));
        }
        if self.log_every < 1 {
            return Err(Error::config("log_every", "must be at least 1"));
        }
        if !(self.delta_conf > 0.0 && self.delta_conf < 1.0) {
            return Err(Error::config(
                "delta",
                format!("must be in (0, 1), got {}", self.delta_conf),
            ));
        }
        if let Architecture::OneHidden { hidden } = self.arch {
            if hidden < 1 {
                return Err(Error::config("hidden", "must be at least 1"));
            }
        }
        Ok(())
    }
}

fn score_kind_str(kind: ScoreKind) -> &'static str {
    match kind {
        ScoreKind::Softmax => "softmax",
        ScoreKind::Aps => "aps",
        ScoreKind::Raps => "raps",
    }
}

/// Accumulates `key=value` assignments (file first, then flags) and
/// resolves them into a validated [`RunConfig`].
#[derive(Debug, Default)]
pub struct ConfigBuilder {
    entries: Vec<(String, String)>,
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends every assignment of a config file, in file order.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (index, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: index + 1,
                    reason: format!("expected key=value, got `{line}`"),
                });
            };
            self.entries
                .push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(())
    }

    /// Appends one assignment; later assignments win.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.push((key.to_string(), value.into()));
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let mut raw = RawConfig::default();
        for (key, value) in &self.entries {
            raw.apply(key, value)?;
        }
        let config = raw.finish()?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Default)]
struct RawConfig {
    algorithm: Option<Algorithm>,
    alpha: Option<f64>,
    eta1: Option<f64>,
    eta2: Option<f64>,
    eta2_grid: Option<Vec<f64>>,
    score: Option<ScoreKind>,
    lambda: Option<f64>,
    kreg: Option<usize>,
    policy: Option<PolicyKind>,
    floor: Option<f64>,
    data: Option<DataKind>,
    arch: Option<ArchKind>,
    hidden: Option<usize>,
    t: Option<u64>,
    batch: Option<usize>,
    reps: Option<usize>,
    seed: Option<u64>,
    log_every: Option<u64>,
    score_log: Option<ScoreLogMode>,
    delta: Option<f64>,
    trace: Option<bool>,
    snapshot: Option<bool>,
    out: Option<PathBuf>,
    gm_k: Option<usize>,
    gm_d: Option<usize>,
    gm_sep: Option<f64>,
    gm_variance: Option<f64>,
    gm_priors: Option<Vec<f64>>,
    file_d: Option<usize>,
    file_k: Option<usize>,
    file_header: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
enum DataKind {
    Gm,
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ArchKind {
    Linear,
    OneHidden,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::config(
            key,
            format!("expected a boolean, got `{value}`"),
        )),
    }
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|item| parse_num::<f64>(key, item.trim()))
        .collect()
}

impl RawConfig {
    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "algorithm" => {
                self.algorithm = Some(match value {
                    "alg1" => Algorithm::Single,
                    "alg2" => Algorithm::Experts,
                    _ => {
                        return Err(Error::config(
                            key,
                            format!("expected alg1 or alg2, got `{value}`"),
                        ))
                    }
                })
            }
            "alpha" => self.alpha = Some(parse_num(key, value)?),
            "eta1" => self.eta1 = Some(parse_num(key, value)?),
            "eta2" => self.eta2 = Some(parse_num(key, value)?),
            "eta2_grid" => self.eta2_grid = Some(parse_f64_list(key, value)?),
            "score" => {
                self.score = Some(match value {
                    "softmax" => ScoreKind::Softmax,
                    "aps" => ScoreKind::Aps,
                    "raps" => ScoreKind::Raps,
                    _ => {
                        return Err(Error::config(
                            key,
                            format!("expected softmax, aps or raps, got `{value}`"),
                        ))
                    }
                })
            }
            "lambda" => self.lambda = Some(parse_num(key, value)?),
            "kreg" => self.kreg = Some(parse_num(key, value)?),
            "policy" => {
                self.policy = Some(match value {
                    "uniform" => PolicyKind::Uniform,
                    "softmax" => PolicyKind::Softmax,
                    "bayes" => PolicyKind::BayesOracle,
                    "label-oracle" => PolicyKind::LabelOracle,
                    _ => {
                        return Err(Error::config(
                            key,
                            format!(
                                "expected uniform, softmax, bayes or label-oracle, got `{value}`"
                            ),
                        ))
                    }
                })
            }
            "floor" => self.floor = Some(parse_num(key, value)?),
            "data" => {
                self.data = Some(if value == "gm" {
                    DataKind::Gm
                } else if let Some(path) = value.strip_prefix("file:") {
                    DataKind::File(PathBuf::from(path))
                } else {
                    return Err(Error::config(
                        key,
                        format!("expected gm or file:PATH, got `{value}`"),
                    ));
                })
            }
            "arch" => {
                self.arch = Some(match value {
                    "linear" => ArchKind::Linear,
                    "one-hidden" | "mlp" => ArchKind::OneHidden,
                    _ => {
                        return Err(Error::config(
                            key,
                            format!("expected linear or one-hidden, got `{value}`"),
                        ))
                    }
                })
            }
            "hidden" => self.hidden = Some(parse_num(key, value)?),
            "t" | "T" => self.t = Some(parse_num(key, value)?),
            "batch" => self.batch = Some(parse_num(key, value)?),
            "reps" => self.reps = Some(parse_num(key, value)?),
            "seed" => self.seed = Some(parse_num(key, value)?),
            "log_every" => self.log_every = Some(parse_num(key, value)?),
            "score_log" => {
                self.score_log = Some(match value {
                    "auto" => ScoreLogMode::Auto,
                    "on" => ScoreLogMode::On,
                    "off" => ScoreLogMode::Off,
                    _ => {
                        return Err(Error::config(
                            key,
                            format!("expected auto, on or off, got `{value}`"),
                        ))
                    }
                })
            }
            "delta" => self.delta = Some(parse_num(key, value)?),
            "trace" => self.trace = Some(parse_bool(key, value)?),
            "snapshot" => self.snapshot = Some(parse_bool(key, value)?),
            "out" => self.out = Some(PathBuf::from(value)),
            "gm_k" => self.gm_k = Some(parse_num(key, value)?),
            "gm_d" => self.gm_d = Some(parse_num(key, value)?),
            "gm_sep" => self.gm_sep = Some(parse_num(key, value)?),
            "gm_variance" => self.gm_variance = Some(parse_num(key, value)?),
            "gm_priors" => self.gm_priors = Some(parse_f64_list(key, value)?),
            "file_d" => self.file_d = Some(parse_num(key, value)?),
            "file_k" => self.file_k = Some(parse_num(key, value)?),
            "file_header" => self.file_header = Some(parse_bool(key, value)?),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    fn finish(self) -> Result<RunConfig> {
        let defaults = RunConfig::default();
        let score_kind = self.score.unwrap_or(defaults.score.kind);
        let score = ScoreSpec {
            kind: score_kind,
            lambda: self.lambda.unwrap_or(defaults.score.lambda),
            k_reg: self.kreg.unwrap_or(defaults.score.k_reg),
        };
        let policy = PolicySpec::new(
            self.policy.unwrap_or(defaults.policy.kind),
            self.floor.unwrap_or(defaults.policy.floor),
        );
        let data = match self.data.unwrap_or(DataKind::Gm) {
            DataKind::Gm => {
                let k = self
                    .gm_k
                    .or_else(|| self.gm_priors.as_ref().map(Vec::len))
                    .unwrap_or(3);
                let d = self.gm_d.unwrap_or(4);
                let sep = self.gm_sep.unwrap_or(3.0);
                let variance = self.gm_variance.unwrap_or(1.0);
                let layout = GaussianMixtureSpec::separated(k, d, sep, variance)?;
                let spec = match self.gm_priors {
                    Some(priors) => {
                        if priors.len() != k {
                            return Err(Error::config(
                                "gm_priors",
                                format!("expected {k} entries, got {}", priors.len()),
                            ));
                        }
                        GaussianMixtureSpec::new(priors, layout.means().to_vec(), variance)?
                    }
                    None => layout,
                };
                DataSourceSpec::Mixture(spec)
            }
            DataKind::File(path) => {
                let schema = infer_file_schema(
                    &path,
                    self.file_header.unwrap_or(false),
                    self.file_d,
                    self.file_k,
                )?;
                DataSourceSpec::File { path, schema }
            }
        };
        let arch = match self.arch.unwrap_or(ArchKind::Linear) {
            ArchKind::Linear => Architecture::Linear,
            ArchKind::OneHidden => Architecture::OneHidden {
                hidden: self.hidden.unwrap_or(16),
            },
        };
        Ok(RunConfig {
            algorithm: self.algorithm.unwrap_or(defaults.algorithm),
            alpha: self.alpha.unwrap_or(defaults.alpha),
            eta1: self.eta1.unwrap_or(defaults.eta1),
            eta2: self.eta2.unwrap_or(defaults.eta2),
            eta2_grid: self.eta2_grid.unwrap_or(defaults.eta2_grid),
            score,
            policy,
            data,
            arch,
            t: self.t.unwrap_or(defaults.t),
            batch_size: self.batch.unwrap_or(defaults.batch_size),
            replications: self.reps.unwrap_or(defaults.replications),
            seed: self.seed.unwrap_or(defaults.seed),
            log_every: self.log_every.unwrap_or(defaults.log_every),
            score_log: self.score_log.unwrap_or(defaults.score_log),
            delta_conf: self.delta.unwrap_or(defaults.delta_conf),
            trace: self.trace.unwrap_or(defaults.trace),
            snapshot: self.snapshot.unwrap_or(defaults.snapshot),
            out: self.out,
        })
    }
}

/// Completes a file schema, peeking at the file for whatever was not
/// given: the dimension from the first data line's arity, the class count
/// from the largest label.
fn infer_file_schema(
    path: &Path,
    has_header: bool,
    dim: Option<usize>,
    classes: Option<usize>,
) -> Result<FileSchema> {
    if let (Some(dim), Some(classes)) = (dim, classes) {
        return Ok(FileSchema {
            dim,
            classes,
            has_header,
        });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data_lines = text
        .lines()
        .enumerate()
        .skip(usize::from(has_header))
        .filter(|(_, line)| !line.trim().is_empty());
    let Some((_, first)) = data_lines.next() else {
        return Err(Error::config(
            "data",
            "cannot infer a schema from an empty file",
        ));
    };
    let arity = if first.contains(',') {
        first.split(',').count()
    } else {
        first.split_whitespace().count()
    };
    if arity < 2 {
        return Err(Error::config(
            "data",
            "need at least one feature column and a label column",
        ));
    }
    let dim = dim.unwrap_or(arity - 1);
    let classes = match classes {
        Some(k) => k,
        None => {
            let mut max_label = 0i64;
            for (index, line) in text
                .lines()
                .enumerate()
                .skip(usize::from(has_header))
                .filter(|(_, l)| !l.trim().is_empty())
            {
                let label_field = if line.contains(',') {
                    line.split(',').next_back()
                } else {
                    line.split_whitespace().next_back()
                };
                let label: i64 = label_field
                    .unwrap_or_default()
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse {
                        path: path.to_path_buf(),
                        line: index + 1,
                        reason: "label is not an integer".to_string(),
                    })?;
                max_label = max_label.max(label);
            }
            if max_label < 2 {
                return Err(Error::config("data", "inferred fewer than 2 classes"));
            }
            max_label as usize
        }
    };
    Ok(FileSchema {
        dim,
        classes,
        has_header,
    })
}
