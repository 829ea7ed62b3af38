//! Probability simplex, conformity scores, and the check loss.
//!
//! Three score families are supported. `softmax` reads the class
//! probability straight off the posterior. `aps` and `raps` are
//! cumulative-probability scores: with classes ordered by decreasing
//! posterior probability and `r` the 1-based rank of class `k`,
//!
//! ```text
//! aps(k)  = 1 - sum_{l<r} p_(l) - u * p_(r)
//! raps(k) = aps(k) - lambda * max(0, r - k_reg)
//! ```
//!
//! where `u` is a single uniform draw shared by all classes of one
//! instance. Larger scores mean the instance looks more like the class,
//! so a prediction set keeps every class whose score clears its
//! threshold. The check loss
//!
//! ```text
//! rho_alpha(s, tau) = (s - tau) * (alpha - 1{s < tau})
//! ```
//!
//! is the pinball loss whose population minimizer over `tau` is the
//! alpha-quantile of `s`; its subgradient drives the online threshold
//! updates in [`crate::conformal`].

use crate::error::{Error, Result};

/// Point on the probability simplex over `K >= 2` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    /// Validates entries in `[0, 1]` summing to 1 within 1e-9.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidProbVector(format!(
                "need at least 2 classes, got {}",
                probs.len()
            )));
        }
        let mut sum = 0.0;
        for (k, &p) in probs.iter().enumerate() {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidProbVector(format!(
                    "entry {k} is {p}, not in [0, 1]"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidProbVector(format!("entries sum to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(classes: usize) -> Self {
        assert!(classes >= 2, "need at least 2 classes");
        Self {
            probs: vec![1.0 / classes as f64; classes],
        }
    }

    /// Mass 1 on `class`. Used by the label-oracle policy.
    pub fn one_hot(classes: usize, class: usize) -> Self {
        assert!(classes >= 2 && class < classes);
        let mut probs = vec![0.0; classes];
        probs[class] = 1.0;
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, class: usize) -> f64 {
        self.probs[class]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

/// Which conformity score to use, with the rank-penalty parameters that
/// only `raps` reads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreSpec {
    pub kind: ScoreKind,
    /// Rank penalty weight; ignored unless `kind` is `Raps`.
    pub lambda: f64,
    /// 1-based rank above which the penalty applies; ignored unless `Raps`.
    pub k_reg: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Softmax,
    Aps,
    Raps,
}

impl ScoreSpec {
    pub fn softmax() -> Self {
        Self {
            kind: ScoreKind::Softmax,
            lambda: 0.0,
            k_reg: 1,
        }
    }

    pub fn aps() -> Self {
        Self {
            kind: ScoreKind::Aps,
            lambda: 0.0,
            k_reg: 1,
        }
    }

    pub fn raps(lambda: f64, k_reg: usize) -> Self {
        Self {
            kind: ScoreKind::Raps,
            lambda,
            k_reg,
        }
    }

    /// Whether every score this spec can produce lies in `[0, 1]`.
    /// `raps` can dip to `-lambda * (K - k_reg)`.
    pub fn unit_bounded(&self) -> bool {
        matches!(self.kind, ScoreKind::Softmax | ScoreKind::Aps) || self.lambda == 0.0
    }

    /// Smallest value a score can take over `classes` classes.
    pub fn score_floor(&self, classes: usize) -> f64 {
        match self.kind {
            ScoreKind::Softmax | ScoreKind::Aps => 0.0,
            ScoreKind::Raps => -self.lambda * classes.saturating_sub(self.k_reg) as f64,
        }
    }
}

/// Conformity score for every class of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    scores: Vec<f64>,
}

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Self {
        Self { scores }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.scores[class]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }
}

/// Numerically stable softmax: invariant under adding a constant to all
/// logits.
pub fn softmax_transform(logits: &[f64]) -> Result<ProbVector> {
    if logits.len() < 2 {
        return Err(Error::InvalidProbVector(format!(
            "need at least 2 logits, got {}",
            logits.len()
        )));
    }
    for (index, &value) in logits.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFiniteLogit { index, value });
        }
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    ProbVector::new(exps.into_iter().map(|e| e / total).collect())
}

/// Classes ordered by decreasing probability, ties broken by ascending
/// class index.
pub(crate) fn decreasing_order(probs: &ProbVector) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs
            .get(b)
            .partial_cmp(&probs.get(a))
            .expect("probabilities are finite")
            .then(a.cmp(&b))
    });
    order
}

/// Scores for all classes of one instance. `u` is drawn once per instance
/// and shared across classes.
pub fn score_all(probs: &ProbVector, u: f64, spec: &ScoreSpec) -> Result<ScoreVector> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::UniformDrawOutOfRange(u));
    }
    match spec.kind {
        ScoreKind::Softmax => Ok(ScoreVector::new(probs.as_slice().to_vec())),
        ScoreKind::Aps | ScoreKind::Raps => {
            let order = decreasing_order(probs);
            let mut scores = vec![0.0; probs.len()];
            let mut cumulative = 0.0;
            for (rank0, &class) in order.iter().enumerate() {
                let p = probs.get(class);
                let mut score = 1.0 - cumulative - u * p;
                if spec.kind == ScoreKind::Raps {
                    let rank = (rank0 + 1) as f64;
                    score -= spec.lambda * (rank - spec.k_reg as f64).max(0.0);
                }
                scores[class] = score;
                cumulative += p;
            }
            Ok(ScoreVector::new(scores))
        }
    }
}

/// Check (pinball) loss `(s - tau) * (alpha - 1{s < tau})`.
pub fn check_loss(s: f64, tau: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    Ok(pinball(s, tau, alpha))
}

/// Subgradient of the check loss in `tau`: `-(alpha - 1{s < tau})`.
/// The indicator is strict, so `s == tau` yields `-alpha`.
pub fn check_subgradient(s: f64, tau: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    Ok(-pinball_direction(s, tau, alpha))
}

/// Unvalidated check loss for hot paths whose alpha was checked at
/// construction.
#[inline]
pub(crate) fn pinball(s: f64, tau: f64, alpha: f64) -> f64 {
    let indicator = if s < tau { 1.0 } else { 0.0 };
    (s - tau) * (alpha - indicator)
}

/// `alpha - 1{s < tau}`, the negated subgradient used directly by the
/// threshold update rule.
#[inline]
pub(crate) fn pinball_direction(s: f64, tau: f64, alpha: f64) -> f64 {
    let indicator = if s < tau { 1.0 } else { 0.0 };
    alpha - indicator
}
