//! Accumulative run metrics, diagnostics, and output writers.
//!
//! Coverage is tracked per class: `acum_cvg(t, k)` is the fraction of
//! class-k instances so far whose prediction set contained the label, and
//! the reported extrema range over classes that have actually appeared.
//! Alongside the headline metrics the run accumulates the quantities the
//! convergence guarantees are stated in:
//!
//! * the signed per-class miscoverage sum, whose normalized absolute
//!   value is the coverage gap `|alpha - empirical miscoverage|`;
//! * the feedback-weighted check loss of the live tracker, compared
//!   after the run against the best fixed threshold in hindsight;
//! * the telescoping direction sum of the threshold updates.
//!
//! File formats: a delimited time-series file with header
//! `step,acum_cvg_min,acum_cvg_max,acum_size,cum_ce_loss` plus one
//! `cvg_class_k` column per class, and a flat `key=value` summary.
//! Unobservable values are written as empty cells / `absent` rather than
//! faked as zero.

use std::io::Write;

use crate::conformal::PredictionSet;
use crate::error::{Error, Result};
use crate::math::pinball;
use crate::policy::{PolicyKind, PolicySpec};

/// Running per-class coverage and global set-size / loss counters.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageAccumulator {
    covered: Vec<u64>,
    total: Vec<u64>,
    arm_correct: Vec<u64>,
    set_size_sum: u64,
    instances: u64,
    ce_loss_sum: f64,
}

impl CoverageAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            covered: vec![0; classes],
            total: vec![0; classes],
            arm_correct: vec![0; classes],
            set_size_sum: 0,
            instances: 0,
            ce_loss_sum: 0.0,
        }
    }

    pub fn classes(&self) -> usize {
        self.total.len()
    }

    /// Folds one instance in: coverage of the true class, set size,
    /// cross-entropy loss, and arm-pull correctness under the true class.
    pub fn record_step(&mut self, set: &PredictionSet, y: usize, arm: usize, ce_loss: f64) {
        self.total[y] += 1;
        self.covered[y] += u64::from(set.contains(y));
        self.arm_correct[y] += u64::from(arm == y);
        self.set_size_sum += set.size() as u64;
        self.instances += 1;
        self.ce_loss_sum += ce_loss;
    }

    pub fn class_count(&self, class: usize) -> u64 {
        self.total[class]
    }

    /// `acum_cvg(t, k)`; absent until class `k` has appeared.
    pub fn class_coverage(&self, class: usize) -> Option<f64> {
        if self.total[class] == 0 {
            None
        } else {
            Some(self.covered[class] as f64 / self.total[class] as f64)
        }
    }

    /// Fraction of class-k instances whose pulled arm was correct.
    pub fn arm_accuracy(&self, class: usize) -> Option<f64> {
        if self.total[class] == 0 {
            None
        } else {
            Some(self.arm_correct[class] as f64 / self.total[class] as f64)
        }
    }

    /// Min and max accumulative coverage over observed classes only.
    pub fn extrema(&self) -> Option<(f64, f64)> {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut seen = false;
        for class in 0..self.classes() {
            if let Some(coverage) = self.class_coverage(class) {
                min = min.min(coverage);
                max = max.max(coverage);
                seen = true;
            }
        }
        seen.then_some((min, max))
    }

    /// Mean prediction-set size over all instances so far.
    pub fn mean_set_size(&self) -> f64 {
        if self.instances == 0 {
            0.0
        } else {
            self.set_size_sum as f64 / self.instances as f64
        }
    }

    pub fn instances(&self) -> u64 {
        self.instances
    }

    pub fn cumulative_ce_loss(&self) -> f64 {
        self.ce_loss_sum
    }
}

/// Quantities the run-level guarantees are stated in, accumulated online.
#[derive(Debug, Clone, PartialEq)]
pub struct RunDiagnostics {
    pub alpha: f64,
    /// Confidence parameter of the coverage-gap bound.
    pub delta_conf: f64,
    /// Per class: `sum_t 1{Y_t=k} (alpha - 1{Y_t not in set})`.
    pub signed_miscoverage: Vec<f64>,
    /// Per class: true-class conformity scores, logged when enabled.
    pub true_class_scores: Option<Vec<Vec<f64>>>,
    /// Per class: `sum_t delta_t * rho_alpha(s_t, tau_pre)` of the live
    /// tracker (the aggregate threshold under the expert ensemble).
    pub tracker_check_loss: Vec<f64>,
    /// Per expert, per class: the same sum at each expert's own
    /// threshold.
    pub expert_check_loss: Option<Vec<Vec<f64>>>,
    /// Per class: `sum_t delta_t * (alpha - 1{s < tau_pre})`; times eta2
    /// this telescopes to the final threshold.
    pub telescope_direction: Vec<f64>,
    /// Known policy floor `c`, when one exists.
    pub c_floor: Option<f64>,
    /// Closed-form `E[1{Y=k} / pi(k|x)]` per class, when available.
    pub b_closed_form: Option<Vec<f64>>,
}

impl RunDiagnostics {
    pub fn new(classes: usize, alpha: f64, delta_conf: f64, log_scores: bool) -> Self {
        Self {
            alpha,
            delta_conf,
            signed_miscoverage: vec![0.0; classes],
            true_class_scores: log_scores.then(|| vec![Vec::new(); classes]),
            tracker_check_loss: vec![0.0; classes],
            expert_check_loss: None,
            telescope_direction: vec![0.0; classes],
            c_floor: None,
            b_closed_form: None,
        }
    }

    pub fn classes(&self) -> usize {
        self.signed_miscoverage.len()
    }

    /// `|alpha - (1/T_k) sum_t 1{Y_t=k} 1{miss}|`; absent until class `k`
    /// has appeared.
    pub fn coverage_gap(&self, class: usize, t_k: u64) -> Option<f64> {
        if t_k == 0 {
            None
        } else {
            Some((self.signed_miscoverage[class] / t_k as f64).abs())
        }
    }

    /// Threshold minimizing the empirical check loss over the logged
    /// true-class scores; absent without a score log or observations.
    pub fn oracle_threshold_for(&self, class: usize) -> Option<f64> {
        let scores = self.true_class_scores.as_ref()?.get(class)?;
        oracle_threshold(scores, self.alpha).ok()
    }

    /// Tracker check-loss regret against the best fixed threshold in
    /// hindsight, normalized by `t`.
    pub fn regret(&self, class: usize, t: u64) -> Option<f64> {
        let scores = self.true_class_scores.as_ref()?.get(class)?;
        let tau_star = oracle_threshold(scores, self.alpha).ok()?;
        let oracle_loss: f64 = scores
            .iter()
            .map(|&s| pinball(s, tau_star, self.alpha))
            .sum();
        Some((self.tracker_check_loss[class] - oracle_loss) / t as f64)
    }

    /// High-probability coverage-gap bound
    /// `tau_T / (eta2 T_k) + zeta(T, delta/K) / T_k`; needs the policy
    /// floor and a closed-form `b`.
    pub fn coverage_gap_bound(
        &self,
        class: usize,
        t: u64,
        t_k: u64,
        eta2: f64,
        tau_final: f64,
    ) -> Option<f64> {
        let c = self.c_floor?;
        let b = *self.b_closed_form.as_ref()?.get(class)?;
        if t_k == 0 {
            return None;
        }
        let delta = self.delta_conf / self.classes() as f64;
        let z = zeta(t as f64 * b, c, delta);
        Some(tau_final / (eta2 * t_k as f64) + z / t_k as f64)
    }

    /// Realized regret of the aggregated threshold against the best
    /// expert in hindsight, normalized by `t`.
    pub fn expert_regret(&self, class: usize, t: u64) -> Option<f64> {
        let expert = self.expert_check_loss.as_ref()?;
        let best = expert
            .iter()
            .map(|per_class| per_class[class])
            .fold(f64::INFINITY, f64::min);
        Some((self.tracker_check_loss[class] - best) / t as f64)
    }
}

/// `zeta(sum_b, c, delta) = 2/(3c) log(2/delta) + sqrt(2 log(2/delta) sum_b)`.
pub fn zeta(sum_b: f64, c: f64, delta: f64) -> f64 {
    let log_term = (2.0 / delta).ln();
    2.0 / (3.0 * c) * log_term + (2.0 * log_term * sum_b).sqrt()
}

/// Deterministic bound on the expert-ensemble regret:
/// `1 / (4 c^2 sqrt(T)) + 2 ln(J) / sqrt(T)`.
pub fn expert_regret_bound(c: f64, t: u64, experts: usize) -> f64 {
    let sqrt_t = (t as f64).sqrt();
    1.0 / (4.0 * c * c * sqrt_t) + 2.0 * (experts as f64).ln() / sqrt_t
}

/// Closed-form `E[1{Y=k}/pi(k|x)]` per class, when the policy admits one
/// over a source with known priors: exactly `K * p_k` for the uniform
/// policy, and `1/(1 - K*floor)` (exactly 1 at floor 0) for the Bayes
/// oracle.
pub fn closed_form_b(policy: &PolicySpec, priors: &[f64]) -> Option<Vec<f64>> {
    let classes = priors.len() as f64;
    match policy.kind {
        PolicyKind::Uniform => Some(priors.iter().map(|&p| classes * p).collect()),
        PolicyKind::BayesOracle => {
            let keep = 1.0 - classes * policy.floor;
            Some(vec![1.0 / keep; priors.len()])
        }
        _ => None,
    }
}

/// `max(1, ceil(alpha * n))`-th smallest score: the lower endpoint of the
/// empirical check-loss minimizer set.
pub fn oracle_threshold(scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    let rank = ((alpha * sorted.len() as f64).ceil() as usize).max(1);
    Ok(sorted[rank - 1])
}

/// One logged point of the run's time series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPoint {
    pub step: u64,
    pub cvg_min: Option<f64>,
    pub cvg_max: Option<f64>,
    pub size: f64,
    pub cum_ce: f64,
    pub per_class: Vec<Option<f64>>,
}

/// Everything one seeded run reports.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub algorithm: String,
    pub classes: usize,
    pub alpha: f64,
    pub t: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub config_hash: String,
    pub score: String,
    pub policy: String,
    pub eta2: Option<f64>,
    pub eta2_grid: Option<Vec<f64>>,
    pub series: Vec<SeriesPoint>,
    pub final_thresholds: Vec<f64>,
    pub class_counts: Vec<u64>,
    pub class_coverage: Vec<Option<f64>>,
    pub arm_accuracy: Vec<Option<f64>>,
    pub mean_set_size: f64,
    pub cum_ce_loss: f64,
    pub clamped_losses: u64,
    pub label_reveals_to_oracle: u64,
    pub c_floor: Option<f64>,
    pub delta_conf: f64,
    pub b_closed_form: Vec<Option<f64>>,
    pub cvg_gap: Vec<Option<f64>>,
    pub cvg_gap_bound: Vec<Option<f64>>,
    pub oracle_thresholds: Vec<Option<f64>>,
    pub regret: Vec<Option<f64>>,
    pub telescope_residual: Vec<Option<f64>>,
    pub expert_regret: Vec<Option<f64>>,
    pub expert_regret_bound: Option<f64>,
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn kv_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_else(|| "absent".to_string())
}

/// Time-series file. Classes are 1-based in column names, matching the
/// dataset file format.
pub fn write_metrics_csv<W: Write>(summary: &RunSummary, out: &mut W) -> std::io::Result<()> {
    let mut header = String::from("step,acum_cvg_min,acum_cvg_max,acum_size,cum_ce_loss");
    for k in 1..=summary.classes {
        header.push_str(&format!(",cvg_class_{k}"));
    }
    writeln!(out, "{header}")?;
    for point in &summary.series {
        let mut row = format!(
            "{},{},{},{},{}",
            point.step,
            fmt_opt(point.cvg_min),
            fmt_opt(point.cvg_max),
            fmt(point.size),
            fmt(point.cum_ce),
        );
        for value in &point.per_class {
            row.push(',');
            row.push_str(&fmt_opt(*value));
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// Flat `key=value` summary, fixed key order, `absent` for unobservable
/// values.
pub fn write_summary<W: Write>(summary: &RunSummary, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "algorithm={}", summary.algorithm)?;
    writeln!(out, "alpha={}", fmt(summary.alpha))?;
    writeln!(out, "t={}", summary.t)?;
    writeln!(out, "batch={}", summary.batch_size)?;
    writeln!(out, "classes={}", summary.classes)?;
    writeln!(out, "seed={}", summary.seed)?;
    writeln!(out, "config_hash={}", summary.config_hash)?;
    writeln!(out, "score={}", summary.score)?;
    writeln!(out, "policy={}", summary.policy)?;
    if let Some(eta2) = summary.eta2 {
        writeln!(out, "eta2={}", fmt(eta2))?;
    }
    if let Some(grid) = &summary.eta2_grid {
        let joined: Vec<String> = grid.iter().map(|&v| fmt(v)).collect();
        writeln!(out, "eta2_grid={}", joined.join(","))?;
    }
    writeln!(out, "acum_size={}", fmt(summary.mean_set_size))?;
    writeln!(out, "cum_ce_loss={}", fmt(summary.cum_ce_loss))?;
    writeln!(out, "clamped_log_count={}", summary.clamped_losses)?;
    writeln!(
        out,
        "label_reveals_to_oracle={}",
        summary.label_reveals_to_oracle
    )?;
    let observed: Vec<f64> = summary.class_coverage.iter().flatten().cloned().collect();
    if observed.is_empty() {
        writeln!(out, "acum_cvg_min=absent")?;
        writeln!(out, "acum_cvg_max=absent")?;
    } else {
        let min = observed.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = observed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        writeln!(out, "acum_cvg_min={}", fmt(min))?;
        writeln!(out, "acum_cvg_max={}", fmt(max))?;
    }
    writeln!(out, "c_floor={}", kv_opt(summary.c_floor))?;
    writeln!(out, "delta_conf={}", fmt(summary.delta_conf))?;
    if let Some(bound) = summary.expert_regret_bound {
        writeln!(out, "expert_regret_bound={}", fmt(bound))?;
    }
    for class in 0..summary.classes {
        let k = class + 1;
        writeln!(out, "t_k_{k}={}", summary.class_counts[class])?;
        writeln!(
            out,
            "acum_cvg_{k}={}",
            kv_opt(summary.class_coverage[class])
        )?;
        writeln!(
            out,
            "arm_correct_{k}={}",
            kv_opt(summary.arm_accuracy[class])
        )?;
        writeln!(
            out,
            "tau_final_{k}={}",
            fmt(summary.final_thresholds[class])
        )?;
        writeln!(out, "cvg_gap_{k}={}", kv_opt(summary.cvg_gap[class]))?;
        writeln!(
            out,
            "cvg_gap_bound_{k}={}",
            kv_opt(summary.cvg_gap_bound[class])
        )?;
        writeln!(out, "b_{k}={}", kv_opt(summary.b_closed_form[class]))?;
        writeln!(
            out,
            "tau_star_{k}={}",
            kv_opt(summary.oracle_thresholds[class])
        )?;
        writeln!(out, "regret_{k}={}", kv_opt(summary.regret[class]))?;
        if let Some(residual) = summary.telescope_residual[class] {
            writeln!(out, "telescope_residual_{k}={}", fmt(residual))?;
        }
        if let Some(regret) = summary.expert_regret[class] {
            writeln!(out, "expert_regret_{k}={}", fmt(regret))?;
        }
    }
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    // summation over sorted values, so any permutation of the runs
    // produces identical aggregate bytes
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    if sorted.len() < 2 {
        return (mean, 0.0);
    }
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate_cell(values: Vec<f64>) -> String {
    if values.is_empty() {
        ",".to_string()
    } else {
        let (mean, std) = mean_std(&values);
        format!("{},{}", fmt(mean), fmt(std))
    }
}

/// Cross-run mean and sample standard deviation of every series column,
/// at each logged step. All runs must share the same step grid.
pub fn write_aggregate_csv<W: Write>(
    summaries: &[&RunSummary],
    out: &mut W,
) -> std::io::Result<()> {
    assert!(!summaries.is_empty(), "no runs to aggregate");
    let first = summaries[0];
    for other in summaries {
        assert_eq!(
            first.series.len(),
            other.series.len(),
            "runs disagree on logged steps"
        );
    }
    let mut header = String::from("step");
    for column in ["acum_cvg_min", "acum_cvg_max", "acum_size", "cum_ce_loss"] {
        header.push_str(&format!(",{column}_mean,{column}_std"));
    }
    for k in 1..=first.classes {
        header.push_str(&format!(",cvg_class_{k}_mean,cvg_class_{k}_std"));
    }
    writeln!(out, "{header}")?;
    type Getter = fn(&SeriesPoint) -> Option<f64>;
    let getters: [Getter; 4] = [
        |p| p.cvg_min,
        |p| p.cvg_max,
        |p| Some(p.size),
        |p| Some(p.cum_ce),
    ];
    for index in 0..first.series.len() {
        let mut row = format!("{}", first.series[index].step);
        for get in getters {
            let values: Vec<f64> = summaries
                .iter()
                .filter_map(|s| get(&s.series[index]))
                .collect();
            row.push(',');
            row.push_str(&aggregate_cell(values));
        }
        for class in 0..first.classes {
            let values: Vec<f64> = summaries
                .iter()
                .filter_map(|s| s.series[index].per_class[class])
                .collect();
            row.push(',');
            row.push_str(&aggregate_cell(values));
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// First logged step at which every observed class coverage sits within
/// `width` of `1 - alpha`; `None` if the run never gets there.
pub fn band_entry_step(summary: &RunSummary, width: f64) -> Option<u64> {
    let target = 1.0 - summary.alpha;
    summary
        .series
        .iter()
        .find(|point| match (point.cvg_min, point.cvg_max) {
            (Some(min), Some(max)) => {
                (min - target).abs() <= width && (max - target).abs() <= width
            }
            _ => false,
        })
        .map(|point| point.step)
}

/// Sample standard deviation of the accumulative set size over the second
/// half of the logged series.
pub fn size_stdev_last_half(summary: &RunSummary) -> f64 {
    let half = summary.t / 2;
    let values: Vec<f64> = summary
        .series
        .iter()
        .filter(|p| p.step > half)
        .map(|p| p.size)
        .collect();
    if values.is_empty() {
        return 0.0;
    }
    mean_std(&values).1
}

/// One row of the learning-rate sweep comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub eta2: f64,
    pub final_cvg_min: Option<f64>,
    pub final_cvg_max: Option<f64>,
    pub final_size: f64,
    /// Mean first step inside the coverage band, censored at
    /// `t + log_every` for runs that never enter it.
    pub band_entry_step: f64,
    pub size_stdev_last_half: f64,
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: &mut W) -> std::io::Result<()> {
    writeln!(
        out,
        "eta2,acum_cvg_min,acum_cvg_max,acum_size,band_entry_step,size_stdev_last_half"
    )?;
    for row in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt(row.eta2),
            fmt_opt(row.final_cvg_min),
            fmt_opt(row.final_cvg_max),
            fmt(row.final_size),
            fmt(row.band_entry_step),
            fmt(row.size_stdev_last_half),
        )?;
    }
    Ok(())
}
