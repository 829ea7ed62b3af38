//! Per-class threshold tracking and prediction-set construction.
//!
//! A [`QuantileBank`] runs one stochastic-subgradient tracker per class:
//!
//! ```text
//! tau_k <- tau_k + eta2 * delta_k * (alpha - 1{s_k < tau_k})
//! ```
//!
//! so `tau_k` follows the alpha-quantile of the class-k conformity score,
//! importance-weighted by the feedback estimate `delta`. Thresholds start
//! at zero and are deliberately left unclamped: the telescoping identity
//! `tau_T = eta2 * sum_t delta_t * (alpha - 1{s < tau})` holds exactly
//! and is checked by the test suite.
//!
//! An [`ExpertBank`] runs `J >= 2` such trackers per class, one per
//! learning rate, and scores each by its accumulated weighted check loss.
//! Prediction uses the exponentially weighted mixture
//! `tau_bar_k = sum_j w_jk tau_jk / sum_j w_jk` with
//! `w_jk = exp(-L_jk / sqrt(t + 1))`, so trackers with smaller loss earn
//! more of the mixture as the run progresses.

use crate::error::{Error, Result};
use crate::math::{pinball, pinball_direction, ScoreVector};

/// One threshold tracker per class, all sharing `alpha` and `eta2`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileBank {
    tau: Vec<f64>,
    alpha: f64,
    eta2: f64,
}

impl QuantileBank {
    /// Thresholds initialize to zero for every class.
    pub fn new(classes: usize, alpha: f64, eta2: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::AlphaOutOfRange(alpha));
        }
        if !eta2.is_finite() || eta2 <= 0.0 {
            return Err(Error::config(
                "eta2",
                format!("must be positive, got {eta2}"),
            ));
        }
        Ok(Self {
            tau: vec![0.0; classes],
            alpha,
            eta2,
        })
    }

    pub fn classes(&self) -> usize {
        self.tau.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eta2(&self) -> f64 {
        self.eta2
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.tau
    }

    pub fn threshold(&self, class: usize) -> f64 {
        self.tau[class]
    }

    /// One subgradient step on class `class` from score `score` and
    /// feedback weight `delta`. Returns the applied direction
    /// `delta * (alpha - 1{s < tau})`, i.e. the increment divided by
    /// `eta2`; callers accumulate it to verify the telescoping identity.
    /// A zero `delta` leaves the threshold untouched.
    pub fn step(&mut self, class: usize, score: f64, delta: f64) -> f64 {
        let direction = delta * pinball_direction(score, self.tau[class], self.alpha);
        self.tau[class] += self.eta2 * direction;
        direction
    }
}

/// Parallel threshold trackers at different learning rates, scored by
/// accumulated weighted check loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    /// `taus[j][k]`: expert `j`'s threshold for class `k`.
    taus: Vec<Vec<f64>>,
    /// `losses[j][k]`: accumulated `delta * rho_alpha` at pre-update taus.
    losses: Vec<Vec<f64>>,
    rates: Vec<f64>,
    alpha: f64,
    step: u64,
}

impl ExpertBank {
    /// Experts start with zero thresholds and zero accumulated loss,
    /// which makes the initial mixture uniform.
    pub fn new(classes: usize, alpha: f64, rates: &[f64]) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::AlphaOutOfRange(alpha));
        }
        if rates.len() < 2 {
            return Err(Error::config(
                "eta2_grid",
                format!("need at least 2 experts, got {}", rates.len()),
            ));
        }
        for &rate in rates {
            if !rate.is_finite() || rate <= 0.0 {
                return Err(Error::config(
                    "eta2_grid",
                    format!("rates must be positive, got {rate}"),
                ));
            }
        }
        Ok(Self {
            taus: vec![vec![0.0; classes]; rates.len()],
            losses: vec![vec![0.0; classes]; rates.len()],
            rates: rates.to_vec(),
            alpha,
            step: 0,
        })
    }

    pub fn classes(&self) -> usize {
        self.taus[0].len()
    }

    pub fn experts(&self) -> usize {
        self.rates.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Completed update steps (instances seen).
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn expert_threshold(&self, expert: usize, class: usize) -> f64 {
        self.taus[expert][class]
    }

    /// Accumulated weighted check loss of each expert at `class`.
    pub fn class_losses(&self, class: usize) -> Vec<f64> {
        self.losses
            .iter()
            .map(|per_class| per_class[class])
            .collect()
    }

    /// Normalized mixture weights `exp(-L_jk / sqrt(t + 1))` for `class`.
    /// The minimum loss is subtracted before exponentiating; the
    /// normalization makes that exact rather than approximate.
    pub fn weights(&self, class: usize) -> Vec<f64> {
        let scale = 1.0 / ((self.step + 1) as f64).sqrt();
        let scores: Vec<f64> = self.losses.iter().map(|l| l[class] * scale).collect();
        let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let raw: Vec<f64> = scores.iter().map(|&s| (-(s - min)).exp()).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }

    /// Mixture threshold for `class`: convex combination of the expert
    /// thresholds under [`Self::weights`], so it always lies between the
    /// smallest and largest expert threshold.
    pub fn aggregate(&self, class: usize) -> f64 {
        let weights = self.weights(class);
        weights
            .iter()
            .zip(self.taus.iter())
            .map(|(w, taus)| w * taus[class])
            .sum()
    }

    pub fn aggregate_all(&self) -> Vec<f64> {
        (0..self.classes()).map(|k| self.aggregate(k)).collect()
    }

    /// Expert with the smallest accumulated loss at `class`, ties broken
    /// by the lower index.
    pub fn best_expert(&self, class: usize) -> usize {
        let mut best = 0;
        for j in 1..self.experts() {
            if self.losses[j][class] < self.losses[best][class] {
                best = j;
            }
        }
        best
    }

    /// One instance: every expert first accrues `delta * rho_alpha` at its
    /// pre-update threshold, then takes its own subgradient step at its
    /// rate. The step counter advances even when `delta` is zero, since
    /// the mixture weights depend on it.
    pub fn step(&mut self, class: usize, score: f64, delta: f64) {
        if delta != 0.0 {
            for j in 0..self.rates.len() {
                let tau = self.taus[j][class];
                self.losses[j][class] += delta * pinball(score, tau, self.alpha);
                self.taus[j][class] +=
                    self.rates[j] * delta * pinball_direction(score, tau, self.alpha);
            }
        }
        self.step += 1;
    }
}

/// Set of classes whose score clears the class threshold, together with
/// the inputs it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    members: Vec<bool>,
    scores: ScoreVector,
    thresholds: Vec<f64>,
}

impl PredictionSet {
    pub fn contains(&self, class: usize) -> bool {
        self.members[class]
    }

    pub fn size(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn classes(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.members
            .iter()
            .enumerate()
            .filter_map(|(k, &m)| m.then_some(k))
    }

    pub fn scores(&self) -> &ScoreVector {
        &self.scores
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }
}

/// Membership is the inclusive comparison `score >= threshold`, so the
/// set may be empty or the full label set.
pub fn predict_set(scores: &ScoreVector, thresholds: &[f64]) -> PredictionSet {
    debug_assert_eq!(scores.len(), thresholds.len());
    let members = scores
        .as_slice()
        .iter()
        .zip(thresholds)
        .map(|(&s, &t)| s >= t)
        .collect();
    PredictionSet {
        members,
        scores: scores.clone(),
        thresholds: thresholds.to_vec(),
    }
}
