//! Acceptance suite: one test per numbered criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them). The oracles here
//! (finite differences, dense grid search, replayed trackers) are written
//! against the public API only and stay independent of the
//! implementation paths they check.

use std::io::Cursor;

use bandit_conformal::config::{Algorithm, RunConfig, ScoreLogMode};
use bandit_conformal::conformal::predict_set;
use bandit_conformal::data::{DataSourceSpec, GaussianMixtureSpec};
use bandit_conformal::math::{check_loss, score_all, ProbVector, ScoreSpec};
use bandit_conformal::metrics::{expert_regret_bound, oracle_threshold};
use bandit_conformal::model::{
    bandit_ce_gradient, bandit_ce_loss, read_snapshot, write_snapshot, Architecture,
    ModelParameters,
};
use bandit_conformal::policy::{
    delta_from_feedback, policy_probs, sample_arm, DeltaEstimate, PolicyContext, PolicyKind,
    PolicySpec,
};
use bandit_conformal::rng::substream;
use bandit_conformal::runner::{replicate, run_online, sweep_eta2, sweep_rows, write_run_outputs};
use rand::Rng;

fn check(criterion: &str, passed: bool, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {criterion}: {verdict} ({detail})");
    assert!(passed, "{criterion}: {detail}");
}

fn mixture_config() -> RunConfig {
    RunConfig {
        policy: PolicySpec::new(PolicyKind::Uniform, 0.0),
        data: DataSourceSpec::Mixture(GaussianMixtureSpec::separated(3, 4, 3.0, 1.0).unwrap()),
        score_log: ScoreLogMode::On,
        ..RunConfig::default()
    }
}

#[test]
fn criterion_01_indicator_estimate_is_unbiased() {
    let classes = 5;
    let y = 2usize;
    let n = 100_000;
    let posterior = ProbVector::new(vec![0.42, 0.23, 0.17, 0.11, 0.07]).unwrap();
    let policies = [
        (
            "uniform",
            policy_probs(
                &PolicySpec::new(PolicyKind::Uniform, 0.0),
                PolicyContext::None,
                classes,
            )
            .unwrap(),
        ),
        (
            "softmax+floor0.05",
            policy_probs(
                &PolicySpec::new(PolicyKind::Softmax, 0.05),
                PolicyContext::ModelPosterior(&posterior),
                classes,
            )
            .unwrap(),
        ),
    ];
    let mut worst = 0.0f64;
    for (name, pi) in &policies {
        let mut rng = substream(1001, 2);
        let mut sums = vec![0.0; classes];
        let mut squares = vec![0.0; classes];
        for _ in 0..n {
            let arm = sample_arm(pi, &mut rng);
            let delta = delta_from_feedback(arm, arm == y, pi).unwrap();
            for k in 0..classes {
                let v = delta.value(k);
                sums[k] += v;
                squares[k] += v * v;
            }
        }
        for k in 0..classes {
            let mean = sums[k] / n as f64;
            let var = (squares[k] / n as f64 - mean * mean).max(0.0);
            let target = if k == y { 1.0 } else { 0.0 };
            let tolerance = 4.0 * (var / n as f64).sqrt();
            let err = (mean - target).abs();
            worst = worst.max(if tolerance > 0.0 {
                err / tolerance
            } else {
                err
            });
            assert!(
                err <= tolerance,
                "{name} class {k}: |{mean} - {target}| > {tolerance}"
            );
        }
    }
    check(
        "01 indicator-unbiasedness",
        true,
        &format!("two policies, K=5, N=1e5; worst error {worst:.3} of the 4-sigma budget"),
    );
}

/// Reconstructs parameters with one flat-index entry shifted by `amount`,
/// going through the textual snapshot so the oracle only touches the
/// public surface.
fn perturbed(params: &ModelParameters, index: usize, amount: f64) -> ModelParameters {
    let mut buffer = Vec::new();
    write_snapshot(params, &mut buffer).unwrap();
    let text = String::from_utf8(buffer).unwrap();
    let mut remaining = Some(index);
    let mut lines = Vec::new();
    for line in text.lines() {
        if line.starts_with("model ") {
            lines.push(line.to_string());
            continue;
        }
        let mut fields: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        let rank: usize = fields[1].parse().unwrap();
        let value_start = 2 + rank;
        let count = fields.len() - value_start;
        if let Some(offset) = remaining {
            if offset < count {
                let value: f64 = fields[value_start + offset].parse().unwrap();
                fields[value_start + offset] = format!("{:?}", value + amount);
                remaining = None;
            } else {
                remaining = Some(offset - count);
            }
        }
        lines.push(fields.join(" "));
    }
    read_snapshot(Cursor::new(lines.join("\n"))).unwrap()
}

#[test]
fn criterion_02_backprop_matches_central_differences() {
    let mut rng = substream(2002, 2);
    let h = 1e-5;
    let mut done = 0;
    let mut worst_rel = 0.0f64;
    while done < 100 {
        let d = rng.random_range(1..=10);
        let k = rng.random_range(2..=5);
        let hidden = rng.random_range(1..=8);
        let arch = if done % 2 == 0 {
            Architecture::Linear
        } else {
            Architecture::OneHidden { hidden }
        };
        let params = ModelParameters::init(arch, d, k, &mut rng);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();

        // skip instances close to the rectifier kink, where central
        // differences are not a valid oracle
        if let Architecture::OneHidden { .. } = arch {
            let tensors = params.tensors();
            let (w1_shape, w1) = (&tensors[0].1, &tensors[0].2);
            let near_kink = (0..w1_shape[0]).any(|row| {
                let pre: f64 = (0..d).map(|col| w1[row * d + col] * x[col]).sum();
                pre.abs() < 1e-3
            });
            if near_kink {
                continue;
            }
        }

        let arm = rng.random_range(0..k);
        let weight = rng.random_range(0.5..5.0);
        let delta = DeltaEstimate::new(arm, weight, k);
        let analytic = bandit_ce_gradient(&params, &x, &delta).unwrap().flat();

        let loss_at = |p: &ModelParameters| {
            let (_, probs) = p.forward(&x).unwrap();
            bandit_ce_loss(&probs, &delta).value
        };
        for (index, &g) in analytic.iter().enumerate() {
            let plus = loss_at(&perturbed(&params, index, h));
            let minus = loss_at(&perturbed(&params, index, -h));
            let fd = (plus - minus) / (2.0 * h);
            let scale = g.abs().max(fd.abs()).max(1.0);
            let rel = (g - fd).abs() / scale;
            worst_rel = worst_rel.max(rel);
            assert!(
                rel <= 1e-5,
                "instance {done} index {index}: backprop {g} vs finite difference {fd}"
            );
        }
        done += 1;
    }
    check(
        "02 gradient-check",
        true,
        &format!("100 random instances; worst relative error {worst_rel:.2e}"),
    );
}

#[test]
fn criterion_03_telescoping_identity() {
    let config = RunConfig {
        algorithm: Algorithm::Single,
        eta2: 0.05,
        t: 10_000,
        seed: 303,
        ..mixture_config()
    };
    let outcome = run_online(&config).unwrap();
    let worst = outcome
        .summary
        .telescope_residual
        .iter()
        .map(|r| r.unwrap())
        .fold(0.0f64, f64::max);
    check(
        "03 telescoping-identity",
        worst <= 1e-9,
        &format!("T=1e4, worst |tau_T - eta2*sum| = {worst:.3e}"),
    );
}

#[test]
fn criterion_04_coverage_converges_under_the_expert_ensemble() {
    let config = RunConfig {
        algorithm: Algorithm::Experts,
        alpha: 0.1,
        eta2_grid: vec![0.1, 0.01, 0.001, 0.0001],
        t: 100_000,
        batch_size: 1,
        replications: 5,
        seed: 404,
        log_every: 5000,
        score_log: ScoreLogMode::Off,
        ..mixture_config()
    };
    let runs = replicate(&config);
    let summaries = runs.completed();
    assert_eq!(summaries.len(), 5);
    let mut seeds_in_band = 0;
    let mut size_sum = 0.0;
    let mut details = Vec::new();
    for summary in &summaries {
        let in_band = summary.class_coverage.iter().all(|coverage| {
            let c = coverage.expect("every class appears at T=1e5");
            (c - 0.90).abs() <= 0.02
        });
        seeds_in_band += u32::from(in_band);
        size_sum += summary.mean_set_size;
        let covs: Vec<String> = summary
            .class_coverage
            .iter()
            .map(|c| format!("{:.3}", c.unwrap()))
            .collect();
        details.push(format!("seed {}: [{}]", summary.seed, covs.join(",")));
    }
    let mean_size = size_sum / summaries.len() as f64;
    let passed = seeds_in_band >= 4 && mean_size < 3.0;
    check(
        "04 coverage-convergence",
        passed,
        &format!(
            "{seeds_in_band}/5 seeds inside 0.90 +- 0.02, mean set size {mean_size:.3}; {}",
            details.join("; ")
        ),
    );
}

#[test]
fn criterion_05_coverage_gap_shrinks_at_a_root_t_rate() {
    let horizons = [10_000u64, 40_000, 160_000];
    let mut points = Vec::new();
    for &t in &horizons {
        let config = RunConfig {
            algorithm: Algorithm::Single,
            eta2: 0.5 / (t as f64).sqrt(),
            score: ScoreSpec::softmax(),
            t,
            batch_size: 1,
            replications: 5,
            seed: 505,
            log_every: t / 10,
            score_log: ScoreLogMode::Off,
            ..mixture_config()
        };
        let runs = replicate(&config);
        let mut gaps = Vec::new();
        for summary in runs.completed() {
            for k in 0..summary.classes {
                gaps.push(summary.cvg_gap[k].unwrap());
            }
        }
        let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
        points.push(((t as f64).ln(), mean_gap.ln()));
    }
    let n = points.len() as f64;
    let x_mean = points.iter().map(|p| p.0).sum::<f64>() / n;
    let y_mean = points.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = points
        .iter()
        .map(|p| (p.0 - x_mean) * (p.1 - y_mean))
        .sum::<f64>()
        / points.iter().map(|p| (p.0 - x_mean).powi(2)).sum::<f64>();
    let gaps: Vec<String> = points.iter().map(|p| format!("{:.4}", p.1.exp())).collect();
    check(
        "05 root-t-rate",
        (-0.8..=-0.2).contains(&slope),
        &format!(
            "mean gaps {} at T in {{1e4,4e4,1.6e5}}; log-log slope {slope:.3}",
            gaps.join(" -> ")
        ),
    );
}

#[test]
fn criterion_06_expert_regret_bound_holds_on_every_run() {
    let config = RunConfig {
        algorithm: Algorithm::Experts,
        eta2_grid: vec![0.1, 0.01, 0.001, 0.0001],
        score: ScoreSpec::aps(),
        data: DataSourceSpec::Mixture(GaussianMixtureSpec::separated(4, 4, 3.0, 1.0).unwrap()),
        t: 10_000,
        replications: 20,
        seed: 606,
        score_log: ScoreLogMode::Off,
        ..mixture_config()
    };
    // plug-in arithmetic for the bound at K=4, T=1e4, J=4
    let bound = expert_regret_bound(0.25, 10_000, 4);
    assert!((bound - 0.0677).abs() < 1e-4, "bound arithmetic: {bound}");

    let runs = replicate(&config);
    let summaries = runs.completed();
    assert_eq!(summaries.len(), 20);
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    for summary in &summaries {
        assert_eq!(summary.expert_regret_bound.unwrap(), bound);
        for k in 0..summary.classes {
            let lhs = summary.expert_regret[k].unwrap();
            worst = worst.max(lhs);
            if lhs > bound {
                violations += 1;
            }
        }
    }
    check(
        "06 expert-regret-bound",
        violations == 0,
        &format!(
            "20 runs x 4 classes; worst realized regret {worst:.5} vs bound {bound:.5}; {violations} violations"
        ),
    );
}

#[test]
fn criterion_07_coverage_gap_bound_violation_frequency() {
    let t = 20_000u64;
    let config = RunConfig {
        algorithm: Algorithm::Single,
        eta2: 0.5 / (t as f64).sqrt(),
        score: ScoreSpec::softmax(),
        t,
        batch_size: 1,
        replications: 40,
        seed: 707,
        log_every: 5000,
        delta_conf: 0.1,
        score_log: ScoreLogMode::Off,
        ..mixture_config()
    };
    let runs = replicate(&config);
    let summaries = runs.completed();
    assert_eq!(summaries.len(), 40);
    // uniform policy on the mixture: b_k = K * p_k = 1 exactly
    for summary in &summaries {
        for k in 0..summary.classes {
            assert!((summary.b_closed_form[k].unwrap() - 1.0).abs() < 1e-12);
        }
        assert_eq!(summary.c_floor.unwrap(), 1.0 / 3.0);
    }
    let mut violating_runs = 0;
    for summary in &summaries {
        let violated = (0..summary.classes)
            .any(|k| summary.cvg_gap[k].unwrap() > summary.cvg_gap_bound[k].unwrap());
        violating_runs += u32::from(violated);
    }
    let frequency = violating_runs as f64 / 40.0;
    let budget = 0.1 + 3.0 * (0.1f64 * 0.9 / 40.0).sqrt();
    check(
        "07 coverage-gap-bound",
        frequency <= budget,
        &format!("violation frequency {frequency:.3} vs budget {budget:.3} over 40 runs"),
    );
}

#[test]
fn criterion_08_label_oracle_reduces_to_plain_pinball_tracking() {
    let config = RunConfig {
        algorithm: Algorithm::Single,
        eta2: 0.05,
        score: ScoreSpec::softmax(),
        policy: PolicySpec::new(PolicyKind::LabelOracle, 0.0),
        t: 2_000,
        seed: 808,
        trace: true,
        score_log: ScoreLogMode::On,
        ..mixture_config()
    };
    let outcome = run_online(&config).unwrap();
    let alpha = config.alpha;
    let scores = outcome.diag.true_class_scores.as_ref().unwrap();
    let trace = outcome.trace.as_ref().unwrap();

    // replay: unweighted pinball tracking on the true-class score stream
    let mut checked_rows = 0;
    for (class, class_scores) in scores.iter().enumerate() {
        let mut tau = 0.0f64;
        let mut replayed = Vec::with_capacity(class_scores.len());
        for &s in class_scores {
            let indicator = if s < tau { 1.0 } else { 0.0 };
            tau += config.eta2 * (alpha - indicator);
            replayed.push(tau);
        }
        let traced: Vec<f64> = trace
            .iter()
            .filter(|row| row.class == class && row.step > 0)
            .map(|row| row.tau)
            .collect();
        assert_eq!(replayed.len(), traced.len());
        for (a, b) in replayed.iter().zip(&traced) {
            assert!(a == b, "class {class}: {a} != {b}");
            checked_rows += 1;
        }
        assert!(tau == outcome.summary.final_thresholds[class]);
    }
    check(
        "08 full-feedback-reduction",
        true,
        &format!("{checked_rows} per-instance thresholds bit-identical to the replayed tracker"),
    );
}

#[test]
fn criterion_09_oracle_threshold_matches_dense_grid_search() {
    let mut rng = substream(909, 2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=50);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let alpha = rng.random_range(0.01..0.99);
        let tau = oracle_threshold(&scores, alpha).unwrap();
        let loss_at = |t: f64| -> f64 {
            scores
                .iter()
                .map(|&s| check_loss(s, t, alpha).unwrap())
                .sum()
        };
        let mut best = f64::INFINITY;
        let mut grid = -0.01f64;
        while grid <= 1.01 {
            best = best.min(loss_at(grid));
            grid += 1e-4;
        }
        let excess = loss_at(tau) - best;
        worst = worst.max(excess);
        assert!(
            excess <= 1e-6,
            "excess loss {excess} at n={n} alpha={alpha}"
        );
    }
    check(
        "09 oracle-threshold",
        true,
        &format!("200 multisets; worst excess over the grid minimum {worst:.2e}"),
    );
}

#[test]
fn criterion_10_aps_sets_are_prefixes() {
    let mut rng = substream(1010, 2);
    let mut tested_sets = 0;
    for _ in 0..1000 {
        let k = rng.random_range(2..=8);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let probs = ProbVector::new(raw.iter().map(|v| v / total).collect()).unwrap();
        let scores = score_all(&probs, 0.0, &ScoreSpec::aps()).unwrap();

        // decreasing-probability order with index tie-break
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            probs
                .get(b)
                .partial_cmp(&probs.get(a))
                .unwrap()
                .then(a.cmp(&b))
        });

        let mut taus: Vec<f64> = scores.as_slice().to_vec();
        taus.push(rng.random_range(-0.1..1.1));
        taus.push(0.0);
        for tau in taus {
            let set = predict_set(&scores, &vec![tau; k]);
            let members: Vec<bool> = order.iter().map(|&c| set.contains(c)).collect();
            let mut excluded_seen = false;
            for &m in &members {
                assert!(
                    !(excluded_seen && m),
                    "set at tau={tau} is not a prefix: {members:?}"
                );
                excluded_seen |= !m;
            }
            tested_sets += 1;
        }
    }
    check(
        "10 aps-prefix-property",
        true,
        &format!("{tested_sets} thresholded sets, all prefixes of the probability order"),
    );
}

#[test]
fn criterion_11_byte_identical_reruns() {
    let temp = tempfile::tempdir().unwrap();
    let mut compared = 0;
    for algorithm in [Algorithm::Single, Algorithm::Experts] {
        let config = RunConfig {
            algorithm,
            t: 3_000,
            seed: 1111,
            trace: true,
            snapshot: true,
            score_log: ScoreLogMode::On,
            policy: PolicySpec::new(PolicyKind::Softmax, 0.01),
            ..mixture_config()
        };
        let tag = config.algorithm.as_str();
        let dir_a = temp.path().join(format!("{tag}_a"));
        let dir_b = temp.path().join(format!("{tag}_b"));
        write_run_outputs(&config, &run_online(&config).unwrap(), &dir_a).unwrap();
        write_run_outputs(&config, &run_online(&config).unwrap(), &dir_b).unwrap();
        for file in ["metrics.csv", "summary.txt", "trace.csv", "params.snapshot"] {
            let a = std::fs::read(dir_a.join(file)).unwrap();
            let b = std::fs::read(dir_b.join(file)).unwrap();
            assert_eq!(a, b, "{tag}/{file} differs between reruns");
            compared += 1;
        }
    }
    check(
        "11 determinism",
        true,
        &format!("{compared} output files byte-identical across reruns of alg1 and alg2"),
    );
}

#[test]
fn criterion_12_larger_eta2_accelerates_coverage_control() {
    // frozen model (eta1 = 0) so the comparison isolates the threshold
    // dynamics; otherwise the slow drift of a still-learning model
    // swamps the oscillation signal in the cumulative set size
    let config = RunConfig {
        algorithm: Algorithm::Single,
        alpha: 0.1,
        eta1: 0.0,
        t: 300_000,
        batch_size: 256,
        replications: 5,
        seed: 1212,
        log_every: 500,
        score_log: ScoreLogMode::Off,
        ..mixture_config()
    };
    let results = sweep_eta2(&config, &[0.1, 0.001]).unwrap();
    let rows = sweep_rows(&results, &config);
    assert_eq!(rows.len(), 2);
    let fast = &rows[0];
    let slow = &rows[1];
    assert_eq!(fast.eta2, 0.1);
    let earlier = fast.band_entry_step < slow.band_entry_step;
    let wigglier = fast.size_stdev_last_half > slow.size_stdev_last_half;
    check(
        "12 eta2-sweep-qualitative",
        earlier && wigglier,
        &format!(
            "band entry {} vs {} steps; size stdev {:.4} vs {:.4}",
            fast.band_entry_step,
            slow.band_entry_step,
            fast.size_stdev_last_half,
            slow.size_stdev_last_half
        ),
    );
}
