//! Arm-pulling policies and the inverse-propensity label estimate.
//!
//! After pulling arm `A` under policy `pi` and observing the binary
//! correctness feedback, the learner forms
//!
//! ```text
//! delta_k = 1{A = k} / pi(A) * 1{A = Y}
//! ```
//!
//! a sparse vector with at most one nonzero entry. Over the policy's
//! randomness its expectation is exactly `1{Y = k}`, which lets the model
//! and the threshold trackers consume feedback-only data as if the label
//! were observed.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::ProbVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    /// Uniform over all classes.
    Uniform,
    /// The model's own posterior.
    Softmax,
    /// True posterior from the synthetic generator. Test/diagnostic only.
    BayesOracle,
    /// Mass 1 on the true label. Test only: turns bandit feedback into
    /// full feedback.
    LabelOracle,
}

impl PolicyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::Uniform => "uniform",
            PolicyKind::Softmax => "softmax",
            PolicyKind::BayesOracle => "bayes",
            PolicyKind::LabelOracle => "label-oracle",
        }
    }

    pub fn is_oracle(&self) -> bool {
        matches!(self, PolicyKind::BayesOracle | PolicyKind::LabelOracle)
    }
}

/// Policy family plus the probability floor `epsilon` mixed with uniform:
/// `pi <- (1 - K * epsilon) * pi + epsilon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub floor: f64,
}

impl PolicySpec {
    pub fn new(kind: PolicyKind, floor: f64) -> Self {
        Self { kind, floor }
    }

    /// Known lower bound on `pi(k|x)` for this policy over `classes`
    /// classes, when one exists. Drives the coverage-gap bound.
    pub fn probability_floor(&self, classes: usize) -> Option<f64> {
        match self.kind {
            PolicyKind::Uniform => Some(1.0 / classes as f64),
            _ if self.floor > 0.0 => Some(self.floor),
            _ => None,
        }
    }
}

/// What a policy needs to know about the current instance.
#[derive(Debug, Clone, Copy)]
pub enum PolicyContext<'a> {
    None,
    /// Model posterior, for the softmax policy.
    ModelPosterior(&'a ProbVector),
    /// True posterior from the data generator, for the Bayes oracle.
    TruePosterior(&'a ProbVector),
    /// True label, for the label oracle.
    TrueLabel(usize),
}

/// Sparse per-class estimate of the label indicator: `weight` at `arm`,
/// zero elsewhere. `weight` is `1 / pi(arm)` when the feedback was
/// correct and 0 otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaEstimate {
    arm: usize,
    weight: f64,
    classes: usize,
}

impl DeltaEstimate {
    pub fn new(arm: usize, weight: f64, classes: usize) -> Self {
        debug_assert!(arm < classes && weight >= 0.0);
        Self {
            arm,
            weight,
            classes,
        }
    }

    pub fn arm(&self) -> usize {
        self.arm
    }

    /// Value of the estimate at the pulled arm.
    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// The estimate at any class: `weight * 1{class == arm}`.
    pub fn value(&self, class: usize) -> f64 {
        debug_assert!(class < self.classes);
        if class == self.arm {
            self.weight
        } else {
            0.0
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weight == 0.0
    }
}

/// Distribution the policy pulls from for one instance, floor-mixed so
/// every class keeps probability at least `spec.floor`.
pub fn policy_probs(
    spec: &PolicySpec,
    context: PolicyContext<'_>,
    classes: usize,
) -> Result<ProbVector> {
    let base = match (spec.kind, context) {
        (PolicyKind::Uniform, _) => ProbVector::uniform(classes),
        (PolicyKind::Softmax, PolicyContext::ModelPosterior(p)) => p.clone(),
        (PolicyKind::Softmax, _) => {
            return Err(Error::MissingPolicyContext {
                policy: "softmax",
                required: "the model posterior",
            })
        }
        (PolicyKind::BayesOracle, PolicyContext::TruePosterior(p)) => p.clone(),
        (PolicyKind::BayesOracle, _) => {
            return Err(Error::MissingPolicyContext {
                policy: "bayes",
                required: "the true posterior",
            })
        }
        (PolicyKind::LabelOracle, PolicyContext::TrueLabel(y)) => ProbVector::one_hot(classes, y),
        (PolicyKind::LabelOracle, _) => {
            return Err(Error::MissingPolicyContext {
                policy: "label-oracle",
                required: "the true label",
            })
        }
    };
    if base.len() != classes {
        return Err(Error::DimensionMismatch {
            expected: classes,
            got: base.len(),
        });
    }
    if spec.floor == 0.0 {
        return Ok(base);
    }
    let keep = 1.0 - classes as f64 * spec.floor;
    let mixed: Vec<f64> = base
        .as_slice()
        .iter()
        .map(|&p| keep * p + spec.floor)
        .collect();
    ProbVector::new(mixed)
}

/// Inverse-CDF draw over ascending class index: one uniform variate per
/// call, deterministic given the generator state.
pub fn sample_arm<R: Rng>(pi: &ProbVector, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (k, &p) in pi.as_slice().iter().enumerate() {
        if p > 0.0 {
            last_positive = k;
        }
        cumulative += p;
        if u < cumulative {
            return k;
        }
    }
    // round-off pushed the cumulative sum below u; never lands on a
    // zero-probability class
    last_positive
}

/// Builds the indicator estimate from one pull and its binary feedback.
pub fn delta_from_feedback(arm: usize, correct: bool, pi: &ProbVector) -> Result<DeltaEstimate> {
    let propensity = pi.get(arm);
    if propensity <= 0.0 {
        return Err(Error::ZeroPropensity { arm });
    }
    let weight = if correct { 1.0 / propensity } else { 0.0 };
    Ok(DeltaEstimate::new(arm, weight, pi.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, STREAM_ARMS};
    use rand::Rng;

    fn uniform_spec() -> PolicySpec {
        PolicySpec::new(PolicyKind::Uniform, 0.0)
    }

    #[test]
    fn uniform_policy_ignores_context() {
        let pi = policy_probs(&uniform_spec(), PolicyContext::None, 4).unwrap();
        for k in 0..4 {
            assert_eq!(pi.get(k), 0.25);
        }
    }

    #[test]
    fn softmax_policy_passes_posterior_through() {
        let p = ProbVector::new(vec![0.7, 0.3]).unwrap();
        let spec = PolicySpec::new(PolicyKind::Softmax, 0.0);
        let pi = policy_probs(&spec, PolicyContext::ModelPosterior(&p), 2).unwrap();
        assert_eq!(pi, p);
    }

    #[test]
    fn floor_mixes_toward_uniform() {
        let p = ProbVector::new(vec![1.0, 0.0]).unwrap();
        let spec = PolicySpec::new(PolicyKind::Softmax, 0.05);
        let pi = policy_probs(&spec, PolicyContext::ModelPosterior(&p), 2).unwrap();
        assert!((pi.get(0) - 0.95).abs() < 1e-12);
        assert!((pi.get(1) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn missing_context_is_an_error() {
        let spec = PolicySpec::new(PolicyKind::Softmax, 0.0);
        assert!(matches!(
            policy_probs(&spec, PolicyContext::None, 3),
            Err(Error::MissingPolicyContext { .. })
        ));
        let spec = PolicySpec::new(PolicyKind::BayesOracle, 0.0);
        assert!(policy_probs(&spec, PolicyContext::None, 3).is_err());
    }

    #[test]
    fn label_oracle_is_one_hot() {
        let spec = PolicySpec::new(PolicyKind::LabelOracle, 0.0);
        let pi = policy_probs(&spec, PolicyContext::TrueLabel(2), 3).unwrap();
        assert_eq!(pi.as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn one_hot_always_samples_its_class() {
        let pi = ProbVector::one_hot(4, 2);
        let mut rng = substream(1, STREAM_ARMS);
        for _ in 0..100 {
            assert_eq!(sample_arm(&pi, &mut rng), 2);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let pi = ProbVector::new(vec![0.2, 0.5, 0.3]).unwrap();
        let draw = |seed| -> Vec<usize> {
            let mut rng = substream(seed, STREAM_ARMS);
            (0..32).map(|_| sample_arm(&pi, &mut rng)).collect()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let k = 4;
        let n = 100_000;
        let pi = ProbVector::uniform(k);
        let mut rng = substream(11, STREAM_ARMS);
        let mut counts = vec![0u64; k];
        for _ in 0..n {
            counts[sample_arm(&pi, &mut rng)] += 1;
        }
        let p = 1.0 / k as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        for &c in &counts {
            let freq = c as f64 / n as f64;
            assert!(
                (freq - p).abs() <= 4.0 * se,
                "frequency {freq} too far from {p}"
            );
        }
    }

    #[test]
    fn delta_weights() {
        let pi = ProbVector::uniform(4);
        let delta = delta_from_feedback(1, true, &pi).unwrap();
        assert_eq!(delta.weight(), 4.0);
        assert_eq!(delta.value(1), 4.0);
        assert_eq!(delta.value(0), 0.0);

        let wrong = delta_from_feedback(1, false, &pi).unwrap();
        assert!(wrong.is_zero());
        assert_eq!(wrong.value(1), 0.0);
    }

    #[test]
    fn zero_propensity_rejected() {
        let pi = ProbVector::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            delta_from_feedback(1, true, &pi),
            Err(Error::ZeroPropensity { arm: 1 })
        ));
    }

    #[test]
    fn delta_bounded_by_inverse_floor() {
        let spec = PolicySpec::new(PolicyKind::Softmax, 0.05);
        let p = ProbVector::new(vec![0.98, 0.01, 0.01]).unwrap();
        let pi = policy_probs(&spec, PolicyContext::ModelPosterior(&p), 3).unwrap();
        for arm in 0..3 {
            let delta = delta_from_feedback(arm, true, &pi).unwrap();
            assert!(delta.weight() <= 1.0 / 0.05 + 1e-9);
        }
    }

    #[test]
    fn label_oracle_delta_is_exact_indicator() {
        let spec = PolicySpec::new(PolicyKind::LabelOracle, 0.0);
        let y = 1;
        let pi = policy_probs(&spec, PolicyContext::TrueLabel(y), 3).unwrap();
        let mut rng = substream(5, STREAM_ARMS);
        let arm = sample_arm(&pi, &mut rng);
        assert_eq!(arm, y);
        let delta = delta_from_feedback(arm, true, &pi).unwrap();
        for k in 0..3 {
            assert_eq!(delta.value(k), if k == y { 1.0 } else { 0.0 });
        }
    }

    /// Monte-Carlo unbiasedness: the average of delta over resampled arms
    /// approaches the true indicator for every class.
    #[test]
    fn delta_is_unbiased_for_the_indicator() {
        let k = 5;
        let y = 2usize;
        let n = 100_000;
        let p = ProbVector::new(vec![0.5, 0.2, 0.15, 0.1, 0.05]).unwrap();
        let spec = PolicySpec::new(PolicyKind::Softmax, 0.02);
        let pi = policy_probs(&spec, PolicyContext::ModelPosterior(&p), k).unwrap();
        let mut rng = substream(21, STREAM_ARMS);
        let mut sums = vec![0.0; k];
        let mut sq_sums = vec![0.0; k];
        for _ in 0..n {
            let arm = sample_arm(&pi, &mut rng);
            let delta = delta_from_feedback(arm, arm == y, &pi).unwrap();
            for class in 0..k {
                let v = delta.value(class);
                sums[class] += v;
                sq_sums[class] += v * v;
            }
        }
        for class in 0..k {
            let mean = sums[class] / n as f64;
            let var = (sq_sums[class] / n as f64 - mean * mean).max(0.0);
            let target = if class == y { 1.0 } else { 0.0 };
            let tol = 4.0 * (var / n as f64).sqrt();
            assert!(
                (mean - target).abs() <= tol,
                "class {class}: mean {mean} vs {target} (tol {tol})"
            );
        }
    }

    #[test]
    fn probability_floor_reporting() {
        assert_eq!(uniform_spec().probability_floor(4), Some(0.25));
        let soft = PolicySpec::new(PolicyKind::Softmax, 0.0);
        assert_eq!(soft.probability_floor(4), None);
        let floored = PolicySpec::new(PolicyKind::Softmax, 0.01);
        assert_eq!(floored.probability_floor(4), Some(0.01));
    }

    #[test]
    fn sample_arm_consumes_one_draw() {
        let pi = ProbVector::uniform(3);
        let mut a = substream(3, STREAM_ARMS);
        let mut b = substream(3, STREAM_ARMS);
        sample_arm(&pi, &mut a);
        let _: f64 = b.random();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }
}
