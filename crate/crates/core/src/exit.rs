//! Exit distribution from gate values and early-exit inference.

use serde::{Deserialize, Serialize};

use crate::backbone::LayeredSample;
use crate::branches::{gate_features_unchecked, ExitModel, GateFeatures};
use crate::error::{Error, Result};
use crate::math::{self, SeededRng};

const CHAIN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ExitDistribution {
    /// Gate values, `g[L-1] == 1`.
    pub g: Vec<f64>,
    /// `P(G = l)` for `l = 1..L` (index `l - 1`).
    pub p: Vec<f64>,
}

/// `P(G=1) = g_1`, `P(G=l) = min(g_l, 1 - Σ_{j<l} g_j)` clamped at 0.
pub fn exit_distribution(g: &[f64]) -> Result<ExitDistribution> {
    let Some(&last) = g.last() else {
        return Err(Error::invalid("empty gate vector"));
    };
    if let Some((l, v)) = g
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::invalid(format!(
            "gate {} value {v} outside [0,1]",
            l + 1
        )));
    }
    if last != 1.0 {
        return Err(Error::invalid(format!(
            "final gate must equal 1, got {last}"
        )));
    }
    Ok(ExitDistribution {
        g: g.to_vec(),
        p: exit_probs(g),
    })
}

pub(crate) fn exit_probs(g: &[f64]) -> Vec<f64> {
    let mut spent = 0.0;
    g.iter()
        .enumerate()
        .map(|(l, &gl)| {
            let p = if l == 0 {
                gl
            } else {
                gl.min(1.0 - spent).max(0.0)
            };
            spent += gl;
            p
        })
        .collect()
}

/// Sequential exit probabilities `P(E^l) = P_l / (1 - Σ_{j<l} P_j)`; 1 once
/// the remaining mass is below 1e-9. The last entry is always 1.
pub fn exit_chain(p: &[f64]) -> Vec<f64> {
    let mut spent = 0.0;
    let n = p.len();
    p.iter()
        .enumerate()
        .map(|(l, &pl)| {
            let remaining = 1.0 - spent;
            spent += pl;
            if l + 1 == n || remaining <= CHAIN_EPS {
                1.0
            } else {
                (pl / remaining).clamp(0.0, 1.0)
            }
        })
        .collect()
}

/// Inverse of [`exit_chain`]: `P_l = E_l Π_{j<l} (1 - E_j)`.
pub fn recompose_chain(e: &[f64]) -> Vec<f64> {
    let mut survive = 1.0;
    e.iter()
        .map(|&el| {
            let p = el * survive;
            survive *= 1.0 - el;
            p
        })
        .collect()
}

/// Every IM, feature vector and gate value for one sample.
#[derive(Debug, Clone)]
pub struct FullPass {
    pub probs: Vec<Vec<f64>>,
    pub features: Vec<GateFeatures>,
    pub gates: Vec<f64>,
    pub exit_probs: Vec<f64>,
}

pub fn full_pass(model: &ExitModel, sample: &LayeredSample) -> FullPass {
    let l_total = model.layers();
    let probs: Vec<Vec<f64>> = model
        .ims
        .iter()
        .zip(&sample.z)
        .map(|(im, z)| im.forward_unchecked(z))
        .collect();
    let features: Vec<GateFeatures> = probs[..l_total - 1]
        .iter()
        .map(|p| gate_features_unchecked(p))
        .collect();
    let mut gates: Vec<f64> = model
        .gates
        .iter()
        .zip(&features)
        .map(|(g, m)| g.forward(m))
        .collect();
    gates.push(1.0);
    let exit_probs = exit_probs(&gates);
    FullPass {
        probs,
        features,
        gates,
        exit_probs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitRule {
    /// Exit at the first `l` with `P(E^l) > 0.5`.
    #[default]
    Deterministic,
    /// Draw `E^l ~ Bernoulli(P(E^l))` layer by layer, i.e. `l ~ P(G | x)`.
    Sampled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitDecision {
    /// 1-based exit layer.
    pub layer: usize,
    pub prediction: usize,
    pub probs: Vec<f64>,
    /// IMs (and gates) evaluated before exiting.
    pub evaluated: usize,
}

fn walk_exits(
    sample: &LayeredSample,
    model: &ExitModel,
    mut take: impl FnMut(f64) -> bool,
) -> ExitDecision {
    let l_total = model.layers();
    let mut gate_sum = 0.0;
    let mut p_sum = 0.0;
    for l in 0..l_total {
        let logits = model.ims[l].logits_unchecked(&sample.z[l]);
        let probs = math::softmax_unchecked(&logits);
        let exit_here = if l + 1 == l_total {
            true
        } else {
            let m = gate_features_unchecked(&probs);
            let g = model.gates[l].forward(&m);
            let p_l = if l == 0 {
                g
            } else {
                g.min(1.0 - gate_sum).max(0.0)
            };
            gate_sum += g;
            let remaining = 1.0 - p_sum;
            p_sum += p_l;
            let e = if remaining <= CHAIN_EPS {
                1.0
            } else {
                (p_l / remaining).clamp(0.0, 1.0)
            };
            take(e)
        };
        if exit_here {
            return ExitDecision {
                layer: l + 1,
                prediction: math::argmax(&logits),
                probs,
                evaluated: l + 1,
            };
        }
    }
    unreachable!("final layer always exits")
}

/// Deterministic early exit: evaluates layers in order and stops at the first
/// `P(E^l) > 0.5`, never touching later IMs or gates.
pub fn decide_exit(sample: &LayeredSample, model: &ExitModel) -> ExitDecision {
    walk_exits(sample, model, |e| e > 0.5)
}

/// Stochastic exit with `l ~ P(G | x)`.
pub fn sample_exit(sample: &LayeredSample, model: &ExitModel, rng: &mut SeededRng) -> ExitDecision {
    walk_exits(sample, model, |e| rng.uniform() < e)
}

pub fn exit_with(
    rule: ExitRule,
    sample: &LayeredSample,
    model: &ExitModel,
    rng: &mut SeededRng,
) -> ExitDecision {
    match rule {
        ExitRule::Deterministic => decide_exit(sample, model),
        ExitRule::Sampled => sample_exit(sample, model, rng),
    }
}
