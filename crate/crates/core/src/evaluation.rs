//! Experiment harness: accuracy/cost curves over λ, per-gate decompositions
//! and the two decoupled baselines (confidence-threshold exits, and learned
//! gates over frozen warm-up IMs).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{DatasetSplit, LayeredSample};
use crate::branches::ExitModel;
use crate::cost::CostTable;
use crate::error::{Error, Result};
use crate::exit::{decide_exit, exit_with, ExitRule};
use crate::math::{self, SeededRng};
use crate::parallel::{map_collect, ExecMode};
use crate::trainer::{bilevel_train, init_model, warmup, TrainConfig, TrainOutcome};
use crate::uncertainty::{
    conformal_set, conformal_thresholds, coverage_and_inefficiency, ece, fit_temperature,
    CalibrationResult, ConformalCalibrator, ConformalStrategy, ExitPrediction, DEFAULT_ECE_BINS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub alpha: f64,
    pub strategy: ConformalStrategy,
    pub bins: usize,
    /// How calibration and test samples are assigned to exits for conformal sets.
    pub conformal_exit: ExitRule,
    /// Fit one temperature per IM on V^2 before computing ECE and sets.
    pub temperature_scaling: bool,
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            strategy: ConformalStrategy::Gated,
            bins: DEFAULT_ECE_BINS,
            conformal_exit: ExitRule::Sampled,
            temperature_scaling: true,
            seed: 0,
            exec: ExecMode::default(),
        }
    }
}

/// How a sample picks its exit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExitPolicy {
    Gates(ExitRule),
    /// First IM whose max probability exceeds the threshold, else the last.
    Threshold(f64),
}

impl ExitPolicy {
    /// 1-based exit layer.
    pub fn exit(&self, model: &ExitModel, s: &LayeredSample, rng: &mut SeededRng) -> usize {
        match *self {
            ExitPolicy::Gates(rule) => exit_with(rule, s, model, rng).layer,
            ExitPolicy::Threshold(tau) => threshold_exit(model, s, tau),
        }
    }
}

pub fn threshold_exit(model: &ExitModel, s: &LayeredSample, tau: f64) -> usize {
    let l_total = model.layers();
    for l in 0..l_total - 1 {
        let p = model.ims[l].forward_unchecked(&s.z[l]);
        if p.iter().copied().fold(f64::NEG_INFINITY, f64::max) > tau {
            return l + 1;
        }
    }
    l_total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateUsage {
    pub layer: usize,
    pub count: usize,
    pub fraction: f64,
    /// Accuracy of IM `l` on the samples that exited there (`None` if none did).
    pub exited_accuracy: Option<f64>,
    /// Accuracy of IM `l` on the whole set.
    pub full_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateUsageReport {
    pub gates: Vec<GateUsage>,
    pub overall_accuracy: f64,
}

impl GateUsageReport {
    /// `Σ_l frac_l · acc(D^l)`.
    pub fn weighted_accuracy(&self) -> f64 {
        self.gates
            .iter()
            .map(|g| g.fraction * g.exited_accuracy.unwrap_or(0.0))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub lambda: f64,
    /// Confidence threshold for baseline points.
    pub threshold: Option<f64>,
    pub accuracy: f64,
    pub ic: f64,
    pub ic_norm: f64,
    pub ece: f64,
    pub coverage: f64,
    pub inefficiency: f64,
    pub usage: GateUsageReport,
}

struct Decision {
    layer: usize,
    correct: bool,
}

fn usage_report(
    model: &ExitModel,
    samples: &[LayeredSample],
    decisions: &[Decision],
    exec: ExecMode,
) -> GateUsageReport {
    let l_total = model.layers();
    let n = samples.len();
    let full_correct: Vec<Vec<bool>> = map_collect(exec, samples, |s| {
        model
            .ims
            .iter()
            .zip(&s.z)
            .map(|(im, z)| math::argmax(&im.logits_unchecked(z)) == s.y)
            .collect()
    });
    let gates = (0..l_total)
        .map(|l| {
            let exited: Vec<&Decision> = decisions.iter().filter(|d| d.layer == l + 1).collect();
            let count = exited.len();
            GateUsage {
                layer: l + 1,
                count,
                fraction: count as f64 / n as f64,
                exited_accuracy: (count > 0)
                    .then(|| exited.iter().filter(|d| d.correct).count() as f64 / count as f64),
                full_accuracy: full_correct.iter().filter(|c| c[l]).count() as f64 / n as f64,
            }
        })
        .collect();
    GateUsageReport {
        gates,
        overall_accuracy: decisions.iter().filter(|d| d.correct).count() as f64 / n as f64,
    }
}

/// Per-gate sample counts and accuracies under deterministic early exit.
pub fn gate_usage_report(
    model: &ExitModel,
    test: &[LayeredSample],
    exec: ExecMode,
) -> Result<GateUsageReport> {
    if test.is_empty() {
        return Err(Error::invalid("gate usage of an empty set"));
    }
    let decisions = map_collect(exec, test, |s| {
        let d = decide_exit(s, model);
        Decision {
            layer: d.layer,
            correct: d.prediction == s.y,
        }
    });
    Ok(usage_report(model, test, &decisions, exec))
}

/// One temperature per IM, fitted on `calib`.
pub fn fit_temperatures(
    model: &ExitModel,
    calib: &[LayeredSample],
) -> Result<Vec<CalibrationResult>> {
    let labels: Vec<usize> = calib.iter().map(|s| s.y).collect();
    (0..model.layers())
        .map(|l| {
            let logits: Vec<Vec<f64>> = calib
                .iter()
                .map(|s| model.ims[l].logits_unchecked(&s.z[l]))
                .collect();
            fit_temperature(&logits, &labels)
        })
        .collect()
}

/// Temperature-scaled distributions of every IM, the exit assigned by
/// `policy`, and the label.
pub fn exit_predictions(
    model: &ExitModel,
    temps: &[CalibrationResult],
    samples: &[LayeredSample],
    policy: ExitPolicy,
    seed: u64,
) -> Vec<ExitPrediction> {
    let mut rng = SeededRng::new(seed);
    samples
        .iter()
        .map(|s| {
            let exit = policy.exit(model, s, &mut rng);
            let probs = model
                .ims
                .iter()
                .zip(&s.z)
                .zip(temps)
                .map(|((im, z), t)| t.probs(&im.logits_unchecked(z)))
                .collect();
            ExitPrediction {
                probs,
                exit,
                label: s.y,
            }
        })
        .collect()
}

fn conformal_metrics(
    model: &ExitModel,
    temps: &[CalibrationResult],
    data: &DatasetSplit,
    policy: ExitPolicy,
    cfg: &EvalConfig,
) -> Result<(ConformalCalibrator, f64, f64)> {
    let calib = exit_predictions(model, temps, &data.validation(), policy, cfg.seed ^ 0xC0FF);
    let cal = conformal_thresholds(&calib, cfg.strategy, cfg.alpha)?;
    let test = exit_predictions(model, temps, &data.test, policy, cfg.seed ^ 0x7E57);
    let sets: Vec<Vec<usize>> = test
        .iter()
        .map(|p| conformal_set(&p.probs[p.exit - 1], p.exit, &cal))
        .collect();
    let labels: Vec<usize> = test.iter().map(|p| p.label).collect();
    let (cov, ineff) = coverage_and_inefficiency(&sets, &labels)?;
    Ok((cal, cov, ineff))
}

/// Test-set point for `model` under the deterministic exit `policy`.
pub fn evaluate_policy(
    model: &ExitModel,
    data: &DatasetSplit,
    costs: &CostTable,
    policy: ExitPolicy,
    conformal_policy: ExitPolicy,
    cfg: &EvalConfig,
) -> Result<CurvePoint> {
    if data.test.is_empty() {
        return Err(Error::invalid("empty test split"));
    }
    let temps = if cfg.temperature_scaling {
        fit_temperatures(model, &data.val2)?
    } else {
        vec![CalibrationResult::default(); model.layers()]
    };
    let decisions: Vec<(Decision, f64)> = map_collect(cfg.exec, &data.test, |s| {
        // Deterministic policies ignore the rng.
        let layer = policy.exit(model, s, &mut SeededRng::new(0));
        let im = &model.ims[layer - 1];
        let logits = im.logits_unchecked(&s.z[layer - 1]);
        let correct = math::argmax(&logits) == s.y;
        let p = temps[layer - 1].probs(&logits);
        let conf = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (Decision { layer, correct }, conf)
    });
    let exits: Vec<usize> = decisions.iter().map(|(d, _)| d.layer).collect();
    let conf: Vec<f64> = decisions.iter().map(|(_, c)| *c).collect();
    let correct: Vec<bool> = decisions.iter().map(|(d, _)| d.correct).collect();
    let decisions: Vec<Decision> = decisions.into_iter().map(|(d, _)| d).collect();
    let usage = usage_report(model, &data.test, &decisions, cfg.exec);
    let (_, coverage, inefficiency) =
        conformal_metrics(model, &temps, data, conformal_policy, cfg)?;
    Ok(CurvePoint {
        lambda: f64::NAN,
        threshold: None,
        accuracy: usage.overall_accuracy,
        ic: costs.average_cost(&exits)?,
        ic_norm: costs.average_cost_norm(&exits)?,
        ece: ece(&conf, &correct, cfg.bins)?,
        coverage,
        inefficiency,
        usage,
    })
}

/// Point for a jointly trained model at cost weight `lambda`.
pub fn evaluate_model(
    model: &ExitModel,
    data: &DatasetSplit,
    costs: &CostTable,
    lambda: f64,
    cfg: &EvalConfig,
) -> Result<CurvePoint> {
    let mut p = evaluate_policy(
        model,
        data,
        costs,
        ExitPolicy::Gates(ExitRule::Deterministic),
        ExitPolicy::Gates(cfg.conformal_exit),
        cfg,
    )?;
    p.lambda = lambda;
    Ok(p)
}

pub const DEFAULT_LAMBDAS: [f64; 6] = [0.01, 0.1, 0.5, 1.0, 3.0, 10.0];

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub point: CurvePoint,
    pub outcome: TrainOutcome,
}

/// Head fit and warm-up shared by every λ of a sweep and by the baselines.
pub fn warm_start(data: &DatasetSplit, costs: &CostTable, cfg: &TrainConfig) -> Result<ExitModel> {
    cfg.validate()?;
    let mut model = init_model(data, cfg);
    warmup(&mut model, data, costs, cfg)?;
    Ok(model)
}

/// Trains one model per λ from a shared warm-up checkpoint; points come back
/// in λ order.
pub fn lambda_sweep(
    base: &TrainConfig,
    data: &DatasetSplit,
    costs: &CostTable,
    lambdas: &[f64],
    eval: &EvalConfig,
) -> Result<Vec<SweepRun>> {
    if lambdas.is_empty() {
        return Err(Error::invalid("lambda sweep needs at least one value"));
    }
    let warm = warm_start(data, costs, base)?;
    sweep_from(&warm, base, data, costs, lambdas, eval)
}

pub fn sweep_from(
    warm: &ExitModel,
    base: &TrainConfig,
    data: &DatasetSplit,
    costs: &CostTable,
    lambdas: &[f64],
    eval: &EvalConfig,
) -> Result<Vec<SweepRun>> {
    let runs = map_collect(base.exec, lambdas, |&lambda| -> Result<SweepRun> {
        let cfg = TrainConfig {
            lambda,
            ..base.clone()
        };
        let annotate = |e: Error| Error::Sweep {
            lambda,
            source: Box::new(e),
        };
        let outcome = bilevel_train(warm.clone(), data, costs, &cfg).map_err(annotate)?;
        let point = evaluate_model(&outcome.model, data, costs, lambda, eval).map_err(annotate)?;
        Ok(SweepRun { point, outcome })
    });
    runs.into_iter().collect()
}

pub fn default_threshold_grid() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Thresholds at evenly spaced quantiles of the non-final IMs' max
/// probabilities on `val1`, so the baseline curve spans the cost range.
pub fn select_threshold_grid(model: &ExitModel, val1: &[LayeredSample], points: usize) -> Vec<f64> {
    let l_total = model.layers();
    let mut conf: Vec<f64> = val1
        .iter()
        .flat_map(|s| {
            (0..l_total - 1).map(move |l| {
                let p = model.ims[l].forward_unchecked(&s.z[l]);
                p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            })
        })
        .collect();
    if conf.is_empty() || points == 0 {
        return Vec::new();
    }
    conf.sort_by(f64::total_cmp);
    let mut grid: Vec<f64> = (0..points)
        .map(|i| {
            let q = (i as f64 + 0.5) / points as f64;
            conf[((q * conf.len() as f64) as usize).min(conf.len() - 1)]
        })
        .collect();
    grid.push(0.0);
    grid.push(1.0);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Confidence-threshold exits over warm-up IMs; one point per threshold.
pub fn threshold_gm_baseline(
    warm: &ExitModel,
    thresholds: &[f64],
    data: &DatasetSplit,
    costs: &CostTable,
    cfg: &EvalConfig,
) -> Result<Vec<CurvePoint>> {
    thresholds
        .iter()
        .map(|&tau| {
            let policy = ExitPolicy::Threshold(tau);
            let mut p = evaluate_policy(warm, data, costs, policy, policy, cfg)?;
            p.threshold = Some(tau);
            Ok(p)
        })
        .collect()
}

/// Learned gates over frozen warm-up IMs: the joint procedure with the
/// CLASSIFIER state never entered.
pub fn frozen_im_ablation(
    warm: &ExitModel,
    cfg: &TrainConfig,
    data: &DatasetSplit,
    costs: &CostTable,
    eval: &EvalConfig,
) -> Result<(CurvePoint, TrainOutcome)> {
    let gates_only = TrainConfig {
        bi_switch: usize::MAX,
        ..cfg.clone()
    };
    let outcome = bilevel_train(warm.clone(), data, costs, &gates_only)?;
    let point = evaluate_model(&outcome.model, data, costs, cfg.lambda, eval)?;
    Ok((point, outcome))
}

/// Linear interpolation of accuracy at `cost` along a curve of
/// `(cost, accuracy)` pairs, clamped to the curve's end points.
pub fn accuracy_at_cost(curve: &[(f64, f64)], cost: f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = curve.to_vec();
    if pts.is_empty() {
        return None;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    if cost <= pts[0].0 {
        return Some(pts[0].1);
    }
    let last = pts[pts.len() - 1];
    if cost >= last.0 {
        return Some(last.1);
    }
    let i = pts.iter().position(|p| p.0 >= cost).expect("bracketed");
    let (lo, hi) = (pts[i - 1], pts[i]);
    if hi.0 == lo.0 {
        return Some(lo.1.max(hi.1));
    }
    Some(lo.1 + (hi.1 - lo.1) * (cost - lo.0) / (hi.0 - lo.0))
}

/// Smallest α (stepping down from `target` by 0.005) whose calibrator reaches
/// empirical coverage `>= 1 - target` on `check`.
pub fn coverage_targeted_alpha(
    calib: &[ExitPrediction],
    check: &[ExitPrediction],
    strategy: ConformalStrategy,
    target: f64,
) -> Result<(f64, ConformalCalibrator)> {
    let labels: Vec<usize> = check.iter().map(|p| p.label).collect();
    let mut alpha = target;
    loop {
        let cal = conformal_thresholds(calib, strategy, alpha)?;
        let sets: Vec<Vec<usize>> = check
            .iter()
            .map(|p| conformal_set(&p.probs[p.exit - 1], p.exit, &cal))
            .collect();
        let (cov, _) = coverage_and_inefficiency(&sets, &labels)?;
        let next = alpha - 0.005;
        if cov >= 1.0 - target || next <= 0.0 {
            return Ok((alpha, cal));
        }
        alpha = next;
    }
}

/// Percentile bootstrap interval for the mean of `values`.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() || resamples == 0 {
        return Err(Error::invalid("bootstrap needs values and resamples"));
    }
    let mut rng = SeededRng::new(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.below(n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let idx = |q: f64| ((q * resamples as f64) as usize).min(resamples - 1);
    Ok((means[idx(tail)], means[idx(1.0 - tail)]))
}

pub const CURVE_HEADER: &str = "lambda,accuracy,ic,ic_norm,ece,coverage,inefficiency";

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.lambda, p.accuracy, p.ic, p.ic_norm, p.ece, p.coverage, p.inefficiency
        );
    }
    out
}

/// Writes `<stem>.csv` and the per-gate JSON sidecar `<stem>.json`.
pub fn write_curve(points: &[CurvePoint], dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.csv")), curve_csv(points))?;
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_vec_pretty(points)?,
    )?;
    Ok(())
}
