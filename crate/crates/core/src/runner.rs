//! The online loop, replication, learning-rate sweeps, and output files.
//!
//! One iteration processes one batch: (1) forward passes for every
//! instance at the batch-start model state, (2) conformity scores with
//! one shared uniform draw per instance, (3) prediction sets against the
//! batch-start thresholds, (4) per instance an arm draw, binary feedback
//! and the indicator estimate, (5) per instance, sequentially, the
//! threshold update (single tracker or expert ensemble), and (6) one
//! mean-gradient model step. Thresholds updated inside a batch apply to
//! the next batch's predictions; within the per-instance updates the
//! indicator comparison always uses the threshold as it stood right
//! before that instance, which is what makes the telescoping identity
//! exact.
//!
//! Randomness is split into fixed substreams (weight init, data, arms,
//! score draws) of one per-run seed, and replication `i` runs at
//! `seed + i`, so every output byte is a function of (config, seed).
//! Replications and per-batch instance evaluation run on the rayon pool
//! under the `parallel` feature; order-preserving collection keeps the
//! results bit-identical to the sequential path.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::config::{Algorithm, RunConfig};
use crate::conformal::{predict_set, ExpertBank, PredictionSet, QuantileBank};
use crate::error::{Error, Result};
use crate::math::{pinball, score_all, ProbVector, ScoreKind, ScoreVector};
use crate::metrics::{
    self, closed_form_b, CoverageAccumulator, RunDiagnostics, RunSummary, SeriesPoint, SweepRow,
};
use crate::model::{batch_update, snapshot_to_file, ModelParameters};
use crate::par;
use crate::policy::{
    delta_from_feedback, policy_probs, sample_arm, DeltaEstimate, PolicyContext, PolicyKind,
};
use crate::rng::{
    replication_seed, substream, STREAM_ARMS, STREAM_DATA, STREAM_SCORE_U, STREAM_WEIGHT_INIT,
};

/// One threshold-trace entry: tracker state after the update at instance
/// `step` (1-based; rows at step 0 give the initial state). For the
/// expert ensemble `tau` is the currently best expert's threshold and
/// `tau_bar` the aggregate; for the single tracker the columns coincide.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub class: usize,
    pub tau: f64,
    pub tau_bar: f64,
}

/// Everything a finished run hands back: the reportable summary, the raw
/// diagnostics it was computed from, the final model, and the optional
/// threshold trace.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub diag: RunDiagnostics,
    pub model: ModelParameters,
    pub trace: Option<Vec<TraceRow>>,
}

enum Tracker {
    Single(QuantileBank),
    Experts(ExpertBank),
}

impl Tracker {
    fn prediction_thresholds(&self) -> Vec<f64> {
        match self {
            Tracker::Single(bank) => bank.thresholds().to_vec(),
            Tracker::Experts(bank) => bank.aggregate_all(),
        }
    }
}

struct PreparedInstance {
    probs: ProbVector,
    scores: ScoreVector,
}

fn abort_at(step: u64) -> impl Fn(Error) -> Error {
    move |source| Error::RunAborted {
        step,
        source: Box::new(source),
    }
}

/// Runs the online loop at the seed in `config`.
pub fn run_online(config: &RunConfig) -> Result<RunOutcome> {
    run_online_seeded(config, config.seed)
}

/// Runs the online loop at an explicit seed (replications reuse one
/// config with derived seeds).
pub fn run_online_seeded(config: &RunConfig, seed: u64) -> Result<RunOutcome> {
    config.validate()?;
    let classes = config.classes();
    let alpha = config.alpha;
    let mut stream = config.data.open()?;
    let dim = stream.dim();

    let mut init_rng = substream(seed, STREAM_WEIGHT_INIT);
    let mut data_rng = substream(seed, STREAM_DATA);
    let mut arm_rng = substream(seed, STREAM_ARMS);
    let mut u_rng = substream(seed, STREAM_SCORE_U);

    let mut model = ModelParameters::init(config.arch, dim, classes, &mut init_rng);
    let mut tracker = match config.algorithm {
        Algorithm::Single => Tracker::Single(QuantileBank::new(classes, alpha, config.eta2)?),
        Algorithm::Experts => Tracker::Experts(ExpertBank::new(classes, alpha, &config.eta2_grid)?),
    };

    let mut acc = CoverageAccumulator::new(classes);
    let mut diag = RunDiagnostics::new(
        classes,
        alpha,
        config.delta_conf,
        config.score_log_enabled(),
    );
    diag.c_floor = config.policy.probability_floor(classes);
    diag.b_closed_form = stream
        .priors()
        .and_then(|priors| closed_form_b(&config.policy, priors));

    let mut trace: Option<Vec<TraceRow>> = config.trace.then(Vec::new);
    if let Some(rows) = &mut trace {
        for class in 0..classes {
            rows.push(TraceRow {
                step: 0,
                class,
                tau: 0.0,
                tau_bar: 0.0,
            });
        }
    }

    let mut series: Vec<SeriesPoint> = Vec::new();
    let mut clamped = 0u64;
    let mut oracle_reveals = 0u64;
    let mut processed = 0u64;
    let mut logged_buckets = 0u64;

    while processed < config.t {
        let batch_len = (config.t - processed).min(config.batch_size as u64) as usize;
        let records = stream.take_batch(batch_len, &mut data_rng);

        // one shared uniform draw per instance, in record order
        let draws: Vec<f64> = (0..batch_len).map(|_| u_rng.random()).collect();

        // (1)-(2) forward passes and scores at the batch-start model
        let frozen_model = &model;
        let score_spec = &config.score;
        let record_slice = &records;
        let prepared: Vec<Result<PreparedInstance>> = par::map_indices(batch_len, |i| {
            let (_, probs) = frozen_model.forward(&record_slice[i].x)?;
            let scores = score_all(&probs, draws[i], score_spec)?;
            Ok(PreparedInstance { probs, scores })
        });
        let mut instances = Vec::with_capacity(batch_len);
        for (i, item) in prepared.into_iter().enumerate() {
            instances.push(item.map_err(abort_at(processed + i as u64 + 1))?);
        }

        // (3) prediction sets against batch-start thresholds
        let thresholds = tracker.prediction_thresholds();
        let sets: Vec<PredictionSet> = instances
            .iter()
            .map(|inst| predict_set(&inst.scores, &thresholds))
            .collect();

        // true posteriors, only when the policy needs them
        let true_posteriors: Option<Vec<ProbVector>> =
            if config.policy.kind == PolicyKind::BayesOracle {
                let mut posteriors = Vec::with_capacity(batch_len);
                for (i, record) in records.iter().enumerate() {
                    let posterior = stream
                        .true_posterior(&record.x)
                        .expect("bayes policy is validated to run on the mixture source")
                        .map_err(abort_at(processed + i as u64 + 1))?;
                    posteriors.push(posterior);
                }
                Some(posteriors)
            } else {
                None
            };

        // (4) arm pulls, feedback, indicator estimates, in record order
        let mut arms = Vec::with_capacity(batch_len);
        let mut deltas = Vec::with_capacity(batch_len);
        for (i, record) in records.iter().enumerate() {
            let wrap = abort_at(processed + i as u64 + 1);
            let context = match config.policy.kind {
                PolicyKind::Uniform => PolicyContext::None,
                PolicyKind::Softmax => PolicyContext::ModelPosterior(&instances[i].probs),
                PolicyKind::BayesOracle => PolicyContext::TruePosterior(
                    &true_posteriors.as_ref().expect("computed above")[i],
                ),
                PolicyKind::LabelOracle => {
                    oracle_reveals += 1;
                    PolicyContext::TrueLabel(record.label.reveal_for_oracle())
                }
            };
            let pi = policy_probs(&config.policy, context, classes).map_err(&wrap)?;
            let arm = sample_arm(&pi, &mut arm_rng);
            let correct = record.label.matches(arm);
            let delta = delta_from_feedback(arm, correct, &pi).map_err(&wrap)?;
            arms.push(arm);
            deltas.push(delta);
        }

        // (6) one mean-gradient model step; forwards use pre-update state
        let batch_input: Vec<(&[f64], DeltaEstimate)> = records
            .iter()
            .zip(&deltas)
            .map(|(record, &delta)| (record.x.as_slice(), delta))
            .collect();
        let outcome =
            batch_update(&mut model, &batch_input, config.eta1).map_err(abort_at(processed + 1))?;
        clamped += outcome.clamped;

        // (5) metrics and sequential per-instance threshold updates
        for i in 0..batch_len {
            let y = records[i].label.reveal_for_metrics();
            let arm = arms[i];
            let weight = deltas[i].weight();
            let score_at_arm = instances[i].scores.get(arm);
            processed += 1;

            acc.record_step(&sets[i], y, arm, outcome.instance_losses[i]);
            diag.signed_miscoverage[y] += alpha - f64::from(!sets[i].contains(y));
            if let Some(log) = &mut diag.true_class_scores {
                log[y].push(instances[i].scores.get(y));
            }

            match &mut tracker {
                Tracker::Single(bank) => {
                    if weight != 0.0 {
                        diag.tracker_check_loss[arm] +=
                            weight * pinball(score_at_arm, bank.threshold(arm), alpha);
                    }
                    let direction = bank.step(arm, score_at_arm, weight);
                    diag.telescope_direction[arm] += direction;
                    if weight != 0.0 {
                        if let Some(rows) = &mut trace {
                            let tau = bank.threshold(arm);
                            rows.push(TraceRow {
                                step: processed,
                                class: arm,
                                tau,
                                tau_bar: tau,
                            });
                        }
                    }
                }
                Tracker::Experts(bank) => {
                    if weight != 0.0 {
                        let tau_bar = bank.aggregate(arm);
                        diag.tracker_check_loss[arm] +=
                            weight * pinball(score_at_arm, tau_bar, alpha);
                    }
                    bank.step(arm, score_at_arm, weight);
                    if weight != 0.0 {
                        if let Some(rows) = &mut trace {
                            let best = bank.best_expert(arm);
                            rows.push(TraceRow {
                                step: processed,
                                class: arm,
                                tau: bank.expert_threshold(best, arm),
                                tau_bar: bank.aggregate(arm),
                            });
                        }
                    }
                }
            }
        }

        let bucket = processed / config.log_every;
        if bucket > logged_buckets {
            series.push(series_point(processed, &acc, classes));
            logged_buckets = bucket;
        }
    }
    if series.last().map(|point| point.step) != Some(config.t) {
        series.push(series_point(config.t, &acc, classes));
    }

    let final_thresholds = tracker.prediction_thresholds();
    if let Tracker::Experts(bank) = &tracker {
        diag.expert_check_loss = Some(
            (0..bank.experts())
                .map(|j| (0..classes).map(|k| bank.class_losses(k)[j]).collect())
                .collect(),
        );
    }

    let class_counts: Vec<u64> = (0..classes).map(|k| acc.class_count(k)).collect();
    let is_single = config.algorithm == Algorithm::Single;
    let telescope_residual: Vec<Option<f64>> = match &tracker {
        Tracker::Single(bank) => (0..classes)
            .map(|k| Some((bank.threshold(k) - config.eta2 * diag.telescope_direction[k]).abs()))
            .collect(),
        Tracker::Experts(_) => vec![None; classes],
    };
    let cvg_gap_bound: Vec<Option<f64>> = (0..classes)
        .map(|k| {
            if is_single {
                diag.coverage_gap_bound(
                    k,
                    config.t,
                    class_counts[k],
                    config.eta2,
                    final_thresholds[k],
                )
            } else {
                None
            }
        })
        .collect();
    let expert_regret: Vec<Option<f64>> = (0..classes)
        .map(|k| diag.expert_regret(k, config.t))
        .collect();
    let expert_regret_bound = match &tracker {
        Tracker::Experts(bank) => diag
            .c_floor
            .map(|c| metrics::expert_regret_bound(c, config.t, bank.experts())),
        Tracker::Single(_) => None,
    };

    let summary = RunSummary {
        algorithm: config.algorithm.as_str().to_string(),
        classes,
        alpha,
        t: config.t,
        batch_size: config.batch_size,
        seed,
        config_hash: config.config_hash(),
        score: match config.score.kind {
            ScoreKind::Softmax => "softmax",
            ScoreKind::Aps => "aps",
            ScoreKind::Raps => "raps",
        }
        .to_string(),
        policy: config.policy.kind.as_str().to_string(),
        eta2: is_single.then_some(config.eta2),
        eta2_grid: (!is_single).then(|| config.eta2_grid.clone()),
        series,
        final_thresholds,
        class_counts: class_counts.clone(),
        class_coverage: (0..classes).map(|k| acc.class_coverage(k)).collect(),
        arm_accuracy: (0..classes).map(|k| acc.arm_accuracy(k)).collect(),
        mean_set_size: acc.mean_set_size(),
        cum_ce_loss: acc.cumulative_ce_loss(),
        clamped_losses: clamped,
        label_reveals_to_oracle: oracle_reveals,
        c_floor: diag.c_floor,
        delta_conf: diag.delta_conf,
        b_closed_form: match &diag.b_closed_form {
            Some(b) => b.iter().map(|&v| Some(v)).collect(),
            None => vec![None; classes],
        },
        cvg_gap: (0..classes)
            .map(|k| diag.coverage_gap(k, class_counts[k]))
            .collect(),
        cvg_gap_bound,
        oracle_thresholds: (0..classes).map(|k| diag.oracle_threshold_for(k)).collect(),
        regret: (0..classes).map(|k| diag.regret(k, config.t)).collect(),
        telescope_residual,
        expert_regret,
        expert_regret_bound,
    };

    Ok(RunOutcome {
        summary,
        diag,
        model,
        trace,
    })
}

fn series_point(step: u64, acc: &CoverageAccumulator, classes: usize) -> SeriesPoint {
    let extrema = acc.extrema();
    SeriesPoint {
        step,
        cvg_min: extrema.map(|(min, _)| min),
        cvg_max: extrema.map(|(_, max)| max),
        size: acc.mean_set_size(),
        cum_ce: acc.cumulative_ce_loss(),
        per_class: (0..classes).map(|k| acc.class_coverage(k)).collect(),
    }
}

/// Independent seeded runs of one config, seeds `seed + i`.
#[derive(Debug)]
pub struct ReplicateOutcome {
    pub runs: Vec<Result<RunOutcome>>,
}

impl ReplicateOutcome {
    /// Summaries of the runs that completed, in replication order.
    pub fn completed(&self) -> Vec<&RunSummary> {
        self.runs
            .iter()
            .filter_map(|run| run.as_ref().ok().map(|outcome| &outcome.summary))
            .collect()
    }

    pub fn outcomes(&self) -> Vec<&RunOutcome> {
        self.runs
            .iter()
            .filter_map(|run| run.as_ref().ok())
            .collect()
    }

    pub fn failures(&self) -> Vec<(usize, &Error)> {
        self.runs
            .iter()
            .enumerate()
            .filter_map(|(index, run)| run.as_ref().err().map(|e| (index, e)))
            .collect()
    }
}

pub fn replicate(config: &RunConfig) -> ReplicateOutcome {
    let runs = par::map_indices(config.replications, |index| {
        run_online_seeded(config, replication_seed(config.seed, index))
    });
    ReplicateOutcome { runs }
}

/// Sequential twin of [`replicate`], kept for the comparison benches.
pub fn replicate_seq(config: &RunConfig) -> ReplicateOutcome {
    let runs = par::map_indices_seq(config.replications, |index| {
        run_online_seeded(config, replication_seed(config.seed, index))
    });
    ReplicateOutcome { runs }
}

/// Coverage band half-width used by the sweep comparison table.
pub const SWEEP_BAND_WIDTH: f64 = 0.02;

/// Full replicate pipeline per learning rate. Single-tracker only; the
/// ensemble exists precisely so this sweep is unnecessary.
pub fn sweep_eta2(config: &RunConfig, grid: &[f64]) -> Result<Vec<(f64, ReplicateOutcome)>> {
    if config.algorithm != Algorithm::Single {
        return Err(Error::config(
            "algorithm",
            "the eta2 sweep runs the single-tracker algorithm only",
        ));
    }
    if grid.is_empty() {
        return Err(Error::config("eta2_grid", "sweep grid must not be empty"));
    }
    Ok(grid
        .iter()
        .map(|&eta2| {
            let mut point = config.clone();
            point.eta2 = eta2;
            (eta2, replicate(&point))
        })
        .collect())
}

/// Comparison table of a sweep: per rate, replication means of the final
/// coverage extrema, final set size, the first step inside the coverage
/// band (censored at `t + log_every` when never reached), and the
/// set-size oscillation over the last half of the run.
pub fn sweep_rows(results: &[(f64, ReplicateOutcome)], config: &RunConfig) -> Vec<SweepRow> {
    let censor = (config.t + config.log_every) as f64;
    results
        .iter()
        .map(|(eta2, outcome)| {
            let summaries = outcome.completed();
            let mut cvg_min = Vec::new();
            let mut cvg_max = Vec::new();
            let mut size = Vec::new();
            let mut entry = Vec::new();
            let mut wobble = Vec::new();
            for summary in &summaries {
                if let Some(last) = summary.series.last() {
                    if let Some(v) = last.cvg_min {
                        cvg_min.push(v);
                    }
                    if let Some(v) = last.cvg_max {
                        cvg_max.push(v);
                    }
                    size.push(last.size);
                }
                entry.push(
                    metrics::band_entry_step(summary, SWEEP_BAND_WIDTH)
                        .map(|s| s as f64)
                        .unwrap_or(censor),
                );
                wobble.push(metrics::size_stdev_last_half(summary));
            }
            let mean = |values: &[f64]| values.iter().sum::<f64>() / values.len().max(1) as f64;
            SweepRow {
                eta2: *eta2,
                final_cvg_min: (!cvg_min.is_empty()).then(|| mean(&cvg_min)),
                final_cvg_max: (!cvg_max.is_empty()).then(|| mean(&cvg_max)),
                final_size: mean(&size),
                band_entry_step: mean(&entry),
                size_stdev_last_half: mean(&wobble),
            }
        })
        .collect()
}

/// Identifies one run's outputs on disk.
#[derive(Debug, Clone)]
pub struct RunHandle {
    pub run_id: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Failed(String),
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_trace_csv<W: std::io::Write>(rows: &[TraceRow], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "t,class,tau,tau_bar")?;
    for row in rows {
        writeln!(
            out,
            "{},{},{},{}",
            row.step,
            row.class + 1,
            row.tau,
            row.tau_bar
        )?;
    }
    Ok(())
}

/// Writes `metrics.csv`, `summary.txt`, and the optional trace and
/// parameter snapshot of one run into `dir`.
pub fn write_run_outputs(config: &RunConfig, outcome: &RunOutcome, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut metrics_buf = Vec::new();
    metrics::write_metrics_csv(&outcome.summary, &mut metrics_buf)
        .map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
    write_file(&dir.join("metrics.csv"), &metrics_buf)?;

    let mut summary_buf = Vec::new();
    metrics::write_summary(&outcome.summary, &mut summary_buf)
        .map_err(|e| Error::io(dir.join("summary.txt"), e))?;
    write_file(&dir.join("summary.txt"), &summary_buf)?;

    if let Some(rows) = &outcome.trace {
        let mut trace_buf = Vec::new();
        write_trace_csv(rows, &mut trace_buf).map_err(|e| Error::io(dir.join("trace.csv"), e))?;
        write_file(&dir.join("trace.csv"), &trace_buf)?;
    }
    if config.snapshot {
        snapshot_to_file(&outcome.model, &dir.join("params.snapshot"))?;
    }
    Ok(())
}

/// Writes per-replication directories `rep_<i>` plus one `aggregate.csv`
/// over the completed runs.
pub fn write_replicate_outputs(
    config: &RunConfig,
    outcome: &ReplicateOutcome,
    dir: &Path,
) -> Result<Vec<RunHandle>> {
    create_dir(dir)?;
    let mut handles = Vec::new();
    for (index, run) in outcome.runs.iter().enumerate() {
        let run_dir = dir.join(format!("rep_{index}"));
        let seed = replication_seed(config.seed, index);
        let status = match run {
            Ok(run_outcome) => {
                write_run_outputs(config, run_outcome, &run_dir)?;
                RunStatus::Completed
            }
            Err(error) => RunStatus::Failed(error.to_string()),
        };
        handles.push(RunHandle {
            run_id: format!("rep_{index}"),
            seed,
            output_dir: run_dir,
            status,
        });
    }
    let completed = outcome.completed();
    if !completed.is_empty() {
        let mut buf = Vec::new();
        metrics::write_aggregate_csv(&completed, &mut buf)
            .map_err(|e| Error::io(dir.join("aggregate.csv"), e))?;
        write_file(&dir.join("aggregate.csv"), &buf)?;
    }
    Ok(handles)
}

/// Writes one subdirectory per sweep point plus the comparison table.
pub fn write_sweep_outputs(
    config: &RunConfig,
    results: &[(f64, ReplicateOutcome)],
    dir: &Path,
) -> Result<()> {
    create_dir(dir)?;
    for (eta2, outcome) in results {
        let mut point_config = config.clone();
        point_config.eta2 = *eta2;
        write_replicate_outputs(&point_config, outcome, &dir.join(format!("eta2_{eta2}")))?;
    }
    let rows = sweep_rows(results, config);
    let mut buf = Vec::new();
    metrics::write_sweep_csv(&rows, &mut buf).map_err(|e| Error::io(dir.join("sweep.csv"), e))?;
    write_file(&dir.join("sweep.csv"), &buf)
}
