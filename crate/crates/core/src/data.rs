//! Data sources for the online loop.
//!
//! Two sources exist: a synthetic isotropic Gaussian mixture whose Bayes
//! posterior has a closed form (which is what lets the bayes-oracle
//! policy and the coverage-bound diagnostics exist at all), and a
//! delimited text file of `d` feature reals followed by a 1-based integer
//! label. Finite sources stream in replacement-free passes and reshuffle
//! between passes when the run is longer than the dataset.
//!
//! The true label rides along inside [`HiddenLabel`], which exposes it
//! only through three named accessors: binary feedback, metrics scoring,
//! and oracle policies. Any other read of the label simply has no API.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math::ProbVector;

/// True class label, visible only through purpose-named accessors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HiddenLabel(usize);

impl HiddenLabel {
    pub fn new(class: usize) -> Self {
        Self(class)
    }

    /// The one bit the learner is allowed: was the pulled arm correct?
    pub fn matches(&self, arm: usize) -> bool {
        self.0 == arm
    }

    /// Full label for scoring coverage and accuracy. Metrics only.
    pub fn reveal_for_metrics(&self) -> usize {
        self.0
    }

    /// Full label for oracle policies. Test/diagnostic use only; the
    /// runner counts every call and reports it in the run summary.
    pub fn reveal_for_oracle(&self) -> usize {
        self.0
    }
}

/// One stream instance: features plus the hidden true label.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamRecord {
    pub x: Vec<f64>,
    pub label: HiddenLabel,
}

impl StreamRecord {
    pub fn new(x: Vec<f64>, class: usize) -> Self {
        Self {
            x,
            label: HiddenLabel::new(class),
        }
    }
}

/// Isotropic Gaussian mixture: `y ~ Categorical(priors)`,
/// `x ~ Normal(means[y], variance * I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureSpec {
    priors: Vec<f64>,
    means: Vec<Vec<f64>>,
    variance: f64,
}

impl GaussianMixtureSpec {
    pub fn new(priors: Vec<f64>, means: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        if priors.len() < 2 {
            return Err(Error::config("gm_priors", "need at least 2 classes"));
        }
        if priors.iter().any(|&p| !p.is_finite() || p <= 0.0) {
            return Err(Error::config("gm_priors", "priors must be positive"));
        }
        let total: f64 = priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "gm_priors",
                format!("priors sum to {total}, expected 1"),
            ));
        }
        if means.len() != priors.len() {
            return Err(Error::config(
                "gm_means",
                "one mean vector per class required",
            ));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::config(
                "gm_means",
                "means must share a positive dimension",
            ));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("gm_means", "means must be finite"));
        }
        if !variance.is_finite() || variance <= 0.0 {
            return Err(Error::config("gm_variance", "variance must be positive"));
        }
        Ok(Self {
            priors,
            means,
            variance,
        })
    }

    /// Uniform priors with well-separated means: axis corners scaled by
    /// `separation` when `classes <= dim`, otherwise a circle of radius
    /// `separation` in the first two coordinates.
    pub fn separated(classes: usize, dim: usize, separation: f64, variance: f64) -> Result<Self> {
        if classes > dim && dim < 2 {
            return Err(Error::config(
                "gm_d",
                "need dim >= 2 to place more classes than dimensions",
            ));
        }
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|k| {
                let mut mean = vec![0.0; dim];
                if classes <= dim {
                    mean[k] = separation;
                } else {
                    let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
                    mean[0] = separation * angle.cos();
                    mean[1] = separation * angle.sin();
                }
                mean
            })
            .collect();
        Self::new(vec![1.0 / classes as f64; classes], means, variance)
    }

    pub fn classes(&self) -> usize {
        self.priors.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }
}

fn draw_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = k;
        }
        cumulative += p;
        if u < cumulative {
            return k;
        }
    }
    last_positive
}

/// One draw from the mixture. Label first, then `dim` normal variates.
pub fn gm_sample_one<R: Rng>(spec: &GaussianMixtureSpec, rng: &mut R) -> StreamRecord {
    let class = draw_categorical(&spec.priors, rng);
    let sigma = spec.variance.sqrt();
    let x = spec.means[class]
        .iter()
        .map(|&mu| mu + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    StreamRecord::new(x, class)
}

/// `n` i.i.d. draws from the mixture.
pub fn gm_sample<R: Rng>(spec: &GaussianMixtureSpec, rng: &mut R, n: usize) -> Vec<StreamRecord> {
    (0..n).map(|_| gm_sample_one(spec, rng)).collect()
}

/// Exact Bayes posterior `P(Y = k | x)`, proportional to
/// `p_k * exp(-||x - mu_k||^2 / (2 variance))`, computed with
/// max-subtraction in the exponent.
pub fn gm_posterior(spec: &GaussianMixtureSpec, x: &[f64]) -> Result<ProbVector> {
    if x.len() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            got: x.len(),
        });
    }
    let log_weights: Vec<f64> = spec
        .means
        .iter()
        .zip(&spec.priors)
        .map(|(mean, &prior)| {
            let sq_dist: f64 = mean.iter().zip(x).map(|(&m, &v)| (v - m) * (v - m)).sum();
            prior.ln() - sq_dist / (2.0 * spec.variance)
        })
        .collect();
    let max = log_weights
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_weights.iter().map(|&w| (w - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    ProbVector::new(weights.into_iter().map(|w| w / total).collect())
}

/// Shape of a delimited dataset file: `dim` feature reals then an integer
/// label in `1..=classes`, comma- or whitespace-separated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FileSchema {
    pub dim: usize,
    pub classes: usize,
    pub has_header: bool,
}

/// Reads every record of a dataset file, in file order. Malformed lines
/// are reported with their 1-based line number.
pub fn file_stream(path: &Path, schema: &FileSchema) -> Result<Vec<StreamRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_error = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut records = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let number = index + 1;
        let line = line.map_err(|e| parse_error(number, e.to_string()))?;
        if schema.has_header && index == 0 {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = if line.contains(',') {
            line.split(',').map(str::trim).collect()
        } else {
            line.split_whitespace().collect()
        };
        if fields.len() != schema.dim + 1 {
            return Err(parse_error(
                number,
                format!("expected {} fields, found {}", schema.dim + 1, fields.len()),
            ));
        }
        let mut x = Vec::with_capacity(schema.dim);
        for (position, field) in fields[..schema.dim].iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| {
                parse_error(
                    number,
                    format!("field {}: `{field}` is not a number", position + 1),
                )
            })?;
            if !value.is_finite() {
                return Err(parse_error(
                    number,
                    format!("field {} is not finite", position + 1),
                ));
            }
            x.push(value);
        }
        let label: i64 = fields[schema.dim].parse().map_err(|_| {
            parse_error(
                number,
                format!("label `{}` is not an integer", fields[schema.dim]),
            )
        })?;
        if label < 1 || label as usize > schema.classes {
            return Err(parse_error(
                number,
                format!("label {label} outside 1..={}", schema.classes),
            ));
        }
        records.push(StreamRecord::new(x, label as usize - 1));
    }
    Ok(records)
}

/// Ordered batch of records plus its 0-based batch index.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub records: Vec<StreamRecord>,
    pub index: usize,
}

/// Splits a record iterator into consecutive batches, optionally passing
/// each record through a seeded shuffle buffer first. The final short
/// batch is emitted. A `shuffle_buffer` of 0 or 1 preserves source order.
pub fn batch_iterator<I, R>(
    source: I,
    batch_size: usize,
    shuffle_buffer: usize,
    rng: R,
) -> BatchIterator<I::IntoIter, R>
where
    I: IntoIterator<Item = StreamRecord>,
    R: Rng,
{
    assert!(batch_size >= 1, "batch size must be at least 1");
    BatchIterator {
        source: source.into_iter(),
        batch_size,
        shuffle_buffer,
        buffer: Vec::new(),
        primed: false,
        next_index: 0,
        rng,
    }
}

pub struct BatchIterator<I, R> {
    source: I,
    batch_size: usize,
    shuffle_buffer: usize,
    buffer: Vec<StreamRecord>,
    primed: bool,
    next_index: usize,
    rng: R,
}

impl<I, R> BatchIterator<I, R>
where
    I: Iterator<Item = StreamRecord>,
    R: Rng,
{
    fn next_record(&mut self) -> Option<StreamRecord> {
        if self.shuffle_buffer <= 1 {
            return self.source.next();
        }
        if !self.primed {
            while self.buffer.len() < self.shuffle_buffer {
                match self.source.next() {
                    Some(record) => self.buffer.push(record),
                    None => break,
                }
            }
            self.primed = true;
        }
        if self.buffer.is_empty() {
            return None;
        }
        let slot = self.rng.random_range(0..self.buffer.len());
        let picked = match self.source.next() {
            Some(replacement) => std::mem::replace(&mut self.buffer[slot], replacement),
            None => self.buffer.swap_remove(slot),
        };
        Some(picked)
    }
}

impl<I, R> Iterator for BatchIterator<I, R>
where
    I: Iterator<Item = StreamRecord>,
    R: Rng,
{
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let mut records = Vec::with_capacity(self.batch_size);
        while records.len() < self.batch_size {
            match self.next_record() {
                Some(record) => records.push(record),
                None => break,
            }
        }
        if records.is_empty() {
            return None;
        }
        let index = self.next_index;
        self.next_index += 1;
        Some(Batch { records, index })
    }
}

/// The runner's record source: an endless mixture stream, or a finite
/// dataset replayed in reshuffled passes.
#[derive(Debug, Clone)]
pub enum RecordStream {
    Mixture(GaussianMixtureSpec),
    Finite {
        records: Vec<StreamRecord>,
        order: Vec<usize>,
        position: usize,
        shuffle: bool,
    },
}

impl RecordStream {
    pub fn mixture(spec: GaussianMixtureSpec) -> Self {
        RecordStream::Mixture(spec)
    }

    pub fn finite(records: Vec<StreamRecord>, shuffle: bool) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::config("data", "dataset is empty"));
        }
        let order = (0..records.len()).collect();
        Ok(RecordStream::Finite {
            records,
            order,
            position: usize::MAX, // forces a (re)shuffle on first draw
            shuffle,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            RecordStream::Mixture(spec) => spec.dim(),
            RecordStream::Finite { records, .. } => records[0].x.len(),
        }
    }

    /// Priors of the generating mixture, when known.
    pub fn priors(&self) -> Option<&[f64]> {
        match self {
            RecordStream::Mixture(spec) => Some(spec.priors()),
            RecordStream::Finite { .. } => None,
        }
    }

    /// True posterior at `x`, when the source knows it.
    pub fn true_posterior(&self, x: &[f64]) -> Option<Result<ProbVector>> {
        match self {
            RecordStream::Mixture(spec) => Some(gm_posterior(spec, x)),
            RecordStream::Finite { .. } => None,
        }
    }

    pub fn next_record<R: Rng>(&mut self, rng: &mut R) -> StreamRecord {
        match self {
            RecordStream::Mixture(spec) => gm_sample_one(spec, rng),
            RecordStream::Finite {
                records,
                order,
                position,
                shuffle,
            } => {
                if *position >= records.len() {
                    if *shuffle {
                        // Fisher-Yates over the index permutation
                        for i in (1..order.len()).rev() {
                            let j = rng.random_range(0..=i);
                            order.swap(i, j);
                        }
                    }
                    *position = 0;
                }
                let record = records[order[*position]].clone();
                *position += 1;
                record
            }
        }
    }

    pub fn take_batch<R: Rng>(&mut self, n: usize, rng: &mut R) -> Vec<StreamRecord> {
        (0..n).map(|_| self.next_record(rng)).collect()
    }
}

/// Where a run's records come from, as configured.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSourceSpec {
    Mixture(GaussianMixtureSpec),
    File { path: PathBuf, schema: FileSchema },
}

impl DataSourceSpec {
    pub fn classes(&self) -> usize {
        match self {
            DataSourceSpec::Mixture(spec) => spec.classes(),
            DataSourceSpec::File { schema, .. } => schema.classes,
        }
    }

    /// Builds the stream, reading the file source eagerly.
    pub fn open(&self) -> Result<RecordStream> {
        match self {
            DataSourceSpec::Mixture(spec) => Ok(RecordStream::mixture(spec.clone())),
            DataSourceSpec::File { path, schema } => {
                let records = file_stream(path, schema)?;
                RecordStream::finite(records, true)
            }
        }
    }
}
