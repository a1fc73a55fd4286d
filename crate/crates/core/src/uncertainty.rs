//! Post-hoc uncertainty: temperature scaling, equal-count ECE and split
//! conformal label sets for early-exit predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, conformal_quantile};

pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 10.0);
const TEMPERATURE_TOL: f64 = 1e-4;
pub const DEFAULT_ECE_BINS: usize = 10;
pub const MIN_BUCKET: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub temperature: f64,
}

impl Default for CalibrationResult {
    fn default() -> Self {
        Self { temperature: 1.0 }
    }
}

impl CalibrationResult {
    /// Predicted class; dividing by a positive temperature keeps the order.
    pub fn predict(&self, logits: &[f64]) -> usize {
        let scaled: Vec<f64> = logits.iter().map(|v| v / self.temperature).collect();
        math::argmax(&scaled)
    }

    pub fn probs(&self, logits: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = logits.iter().map(|v| v / self.temperature).collect();
        math::softmax_unchecked(&scaled)
    }
}

/// Mean negative log-likelihood of `softmax(logits / t)`.
pub fn nll(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
            let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - scaled[y]
        })
        .sum();
    total / logits.len() as f64
}

/// Golden-section search for the NLL-minimising temperature on
/// `[0.05, 10]`. The endpoints and `T = 1` are also scored so the result is
/// never worse than leaving the logits alone. An empty set yields `T = 1`.
pub fn fit_temperature(logits: &[Vec<f64>], labels: &[usize]) -> Result<CalibrationResult> {
    if logits.len() != labels.len() {
        return Err(Error::invalid("logits and labels differ in length"));
    }
    if logits.is_empty() {
        log::warn!("empty calibration set; temperature scaling skipped");
        return Ok(CalibrationResult::default());
    }
    let f = |t: f64| nll(logits, labels, t);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = TEMPERATURE_RANGE;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > TEMPERATURE_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    let temperature = [mid, TEMPERATURE_RANGE.0, TEMPERATURE_RANGE.1, 1.0]
        .into_iter()
        .map(|t| (t, f(t)))
        .fold((1.0, f64::INFINITY), |best, cand| {
            if cand.1 < best.1 {
                cand
            } else {
                best
            }
        })
        .0;
    Ok(CalibrationResult { temperature })
}

/// Expected calibration error with `bins` equal-count bins over the sorted
/// confidences. Bin `b` holds sorted positions
/// `floor(N(b-1)/B) .. floor(Nb/B)`.
pub fn ece(p_max: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if p_max.len() != correct.len() {
        return Err(Error::invalid(
            "confidence and correctness lists differ in length",
        ));
    }
    let n = p_max.len();
    if n == 0 {
        return Err(Error::invalid("ECE of an empty set"));
    }
    if bins == 0 {
        return Err(Error::invalid("ECE needs at least one bin"));
    }
    let bins = if n < bins {
        log::warn!("only {n} samples for {bins} ECE bins; using {n} bins");
        n
    } else {
        bins
    };
    let mut order: Vec<(f64, bool)> = p_max.iter().copied().zip(correct.iter().copied()).collect();
    order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let mut total = 0.0;
    for b in 0..bins {
        let lo = n * b / bins;
        let hi = n * (b + 1) / bins;
        if hi == lo {
            continue;
        }
        let bin = &order[lo..hi];
        let conf: f64 = bin.iter().map(|v| v.0).sum::<f64>() / bin.len() as f64;
        let acc = bin.iter().filter(|v| v.1).count() as f64 / bin.len() as f64;
        total += bin.len() as f64 / n as f64 * (acc - conf).abs();
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ConformalStrategy {
    /// One threshold from every sample scored at its own exit.
    General,
    /// Per-exit thresholds, every sample scored under each IM.
    #[serde(rename = "IMs")]
    Ims,
    /// Per-exit thresholds from the samples exiting there only; 0 if none.
    StrictGating,
    /// Strict gating, falling back to the general threshold below 20 samples.
    #[default]
    Gated,
}

/// Calibration-set prediction: every IM's distribution and the assigned exit.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitPrediction {
    pub probs: Vec<Vec<f64>>,
    /// 1-based exit layer.
    pub exit: usize,
    pub label: usize,
}

impl ExitPrediction {
    fn score_at(&self, layer: usize) -> f64 {
        1.0 - self.probs[layer - 1][self.label]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibrator {
    pub strategy: ConformalStrategy,
    pub alpha: f64,
    /// Threshold applied at each exit.
    pub thresholds: Vec<f64>,
    pub global: f64,
    pub min_bucket: usize,
}

impl ConformalCalibrator {
    pub fn threshold(&self, layer: usize) -> f64 {
        self.thresholds[layer - 1]
    }
}

pub fn conformal_thresholds(
    preds: &[ExitPrediction],
    strategy: ConformalStrategy,
    alpha: f64,
) -> Result<ConformalCalibrator> {
    if preds.is_empty() {
        return Err(Error::invalid("empty calibration set"));
    }
    let layers = preds[0].probs.len();
    if preds
        .iter()
        .any(|p| p.probs.len() != layers || p.exit == 0 || p.exit > layers)
    {
        return Err(Error::invalid("inconsistent exit predictions"));
    }
    let general_scores: Vec<f64> = preds.iter().map(|p| p.score_at(p.exit)).collect();
    let global = conformal_quantile(&general_scores, alpha)?;
    let bucket = |layer: usize| -> Vec<f64> {
        preds
            .iter()
            .filter(|p| p.exit == layer)
            .map(|p| p.score_at(layer))
            .collect()
    };
    let thresholds = (1..=layers)
        .map(|layer| -> Result<f64> {
            Ok(match strategy {
                ConformalStrategy::General => global,
                ConformalStrategy::Ims => {
                    let scores: Vec<f64> = preds.iter().map(|p| p.score_at(layer)).collect();
                    conformal_quantile(&scores, alpha)?
                }
                ConformalStrategy::StrictGating => {
                    let scores = bucket(layer);
                    if scores.is_empty() {
                        0.0
                    } else {
                        conformal_quantile(&scores, alpha)?
                    }
                }
                ConformalStrategy::Gated => {
                    let scores = bucket(layer);
                    if scores.len() < MIN_BUCKET {
                        global
                    } else {
                        conformal_quantile(&scores, alpha)?
                    }
                }
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ConformalCalibrator {
        strategy,
        alpha,
        thresholds,
        global,
        min_bucket: MIN_BUCKET,
    })
}

/// `{k : 1 - p_k < τ_l}` for a prediction made at exit `layer`.
pub fn conformal_set(probs: &[f64], layer: usize, cal: &ConformalCalibrator) -> Vec<usize> {
    let tau = cal.threshold(layer);
    probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| 1.0 - p < tau)
        .map(|(k, _)| k)
        .collect()
}

/// Empirical coverage and mean set size.
pub fn coverage_and_inefficiency(sets: &[Vec<usize>], labels: &[usize]) -> Result<(f64, f64)> {
    if sets.len() != labels.len() {
        return Err(Error::invalid("sets and labels differ in length"));
    }
    if sets.is_empty() {
        return Err(Error::invalid("coverage of an empty set list"));
    }
    let n = sets.len() as f64;
    let covered = sets
        .iter()
        .zip(labels)
        .filter(|(s, y)| s.contains(y))
        .count() as f64;
    let size: usize = sets.iter().map(Vec::len).sum();
    Ok((covered / n, size as f64 / n))
}

/// Serialised calibration state: conformal thresholds plus one temperature per IM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub strategy: ConformalStrategy,
    pub alpha: f64,
    pub thresholds: Vec<f64>,
    pub global_threshold: f64,
    pub temperatures: Vec<f64>,
}

impl CalibrationArtifact {
    pub fn new(cal: &ConformalCalibrator, temps: &[CalibrationResult]) -> Self {
        Self {
            strategy: cal.strategy,
            alpha: cal.alpha,
            thresholds: cal.thresholds.clone(),
            global_threshold: cal.global,
            temperatures: temps.iter().map(|t| t.temperature).collect(),
        }
    }
}
