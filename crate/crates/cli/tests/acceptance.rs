//! Acceptance checks, one line per criterion. Runs as a plain binary so the
//! report is always printed; exits non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use eedn_core::backbone::{synth_generate, LayeredSample, SynthConfig};
use eedn_core::branches::{gate_features, Gate, InferenceModule};
use eedn_core::cost::t2t_vit7_fixture;
use eedn_core::evaluation::{
    accuracy_at_cost, select_threshold_grid, sweep_from, threshold_gm_baseline, warm_start,
    EvalConfig,
};
use eedn_core::exit::{exit_chain, exit_distribution};
use eedn_core::math::{DenseMatrix, SeededRng};
use eedn_core::trainer::{surrogate_targets, GateCosts, TargetStrategy};
use eedn_core::uncertainty::{
    conformal_set, conformal_thresholds, ece, fit_temperature, ConformalStrategy, ExitPrediction,
};
use eedn_core::{train, CostTable, ExecMode, TrainConfig};

// Pinned tolerances and budgets.
const FD_EPS: f64 = 1e-5;
const FD_MAX_ERR: f64 = 1e-6;
const FD_INSTANCES: usize = 100;
const FD_BUDGET: Duration = Duration::from_secs(10);
const DIST_SAMPLES: usize = 10_000;
const DIST_TOL: f64 = 1e-9;
const OVERHEAD_LIMIT: f64 = 0.003 / 100.0;
const CONFORMAL_N: usize = 500;
const CONFORMAL_K: usize = 5;
const CONFORMAL_SEEDS: u64 = 20;
const CONFORMAL_SLACK: f64 = 0.04;
const CONFORMAL_BUDGET: Duration = Duration::from_secs(60);
const ECE_DATASETS: usize = 50;
const ECE_TOL: f64 = 1e-12;
const TREND_LAMBDAS: [f64; 4] = [0.1, 0.5, 1.0, 3.0];
const TREND_MIN_WINS: usize = 3;
const TREND_BUDGET: Duration = Duration::from_secs(300);
const TREND_THRESHOLDS: usize = 12;
const UNIFORM_LAYER_COST: u64 = 1000;
const GATE_FEATURE_OPS: u64 = 92;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---- independent oracles -------------------------------------------------

fn log_softmax_at(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits[y] - lse
}

fn im_loss(w: &[f64], b: &[f64], k: usize, z: &[f64], y: usize, weight: f64) -> f64 {
    let d = z.len();
    let logits: Vec<f64> = (0..k)
        .map(|r| (0..d).map(|c| w[r * d + c] * z[c]).sum::<f64>() + b[r])
        .collect();
    -weight * log_softmax_at(&logits, y)
}

fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

/// `weight * BCE(t, sigmoid(s))` written through softplus.
fn gate_loss(w: &[f64], b: f64, m: &[f64], t: f64, weight: f64) -> f64 {
    let s: f64 = w.iter().zip(m).map(|(a, x)| a * x).sum::<f64>() + b;
    weight * (t * softplus(-s) + (1.0 - t) * softplus(s))
}

fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_EPS;
            let up = f(&probe);
            probe[i] = orig - FD_EPS;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

/// Rank-by-counting equal-count binning, no sorting.
fn ece_oracle(p: &[f64], correct: &[bool], bins: usize) -> f64 {
    let n = p.len();
    let bins = bins.min(n);
    let key = |i: usize| (p[i], correct[i] as u8);
    let rank = |i: usize| {
        (0..n)
            .filter(|&j| {
                let (a, b) = (key(j), key(i));
                a.0 < b.0 || (a.0 == b.0 && (a.1 < b.1 || (a.1 == b.1 && j < i)))
            })
            .count()
    };
    let ranks: Vec<usize> = (0..n).map(rank).collect();
    let mut total = 0.0;
    for b in 0..bins {
        let (lo, hi) = (n * b / bins, n * (b + 1) / bins);
        let members: Vec<usize> = (0..n)
            .filter(|&i| ranks[i] >= lo && ranks[i] < hi)
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|&&i| correct[i]).count() as f64 / m;
        let conf = members.iter().map(|&i| p[i]).sum::<f64>() / m;
        total += m / n as f64 * (acc - conf).abs();
    }
    total
}

fn uniform_costs(meta_dims: &[usize], classes: usize) -> CostTable {
    CostTable::for_branches(
        &vec![UNIFORM_LAYER_COST; meta_dims.len()],
        meta_dims,
        classes,
        GATE_FEATURE_OPS,
    )
    .expect("cost table")
}

// ---- criteria ------------------------------------------------------------

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(101);
    let mut im_err: f64 = 0.0;
    for _ in 0..FD_INSTANCES {
        let k = 2 + rng.below(5);
        let d = 1 + rng.below(8);
        let w: Vec<f64> = (0..k * d).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let z: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let y = rng.below(k);
        let weight = 0.1 + rng.uniform() * 2.0;
        let im = InferenceModule {
            layer: 1,
            weights: DenseMatrix::from_vec(k, d, w.clone()).expect("finite"),
            bias: b.clone(),
        };
        let g = im.grad(&z, y, weight).expect("shapes agree");
        let fw = central_diff(&|x: &[f64]| im_loss(x, &b, k, &z, y, weight), &w);
        let fb = central_diff(&|x: &[f64]| im_loss(&w, x, k, &z, y, weight), &b);
        for (a, n) in g
            .weights
            .as_slice()
            .iter()
            .zip(&fw)
            .chain(g.bias.iter().zip(&fb))
        {
            im_err = im_err.max((a - n).abs());
        }
    }
    let mut gate_err: f64 = 0.0;
    for _ in 0..FD_INSTANCES {
        let k = 2 + rng.below(5);
        let logits: Vec<f64> = (0..k).map(|_| 2.0 * rng.normal()).collect();
        let m = gate_features(&eedn_core::math::softmax(&logits).expect("finite")).expect("k >= 2");
        let mut gate = Gate::new(1);
        for v in &mut gate.weights {
            *v = rng.normal();
        }
        gate.bias = rng.normal();
        let t = (rng.below(2)) as f64;
        let weight = 0.1 + rng.uniform() * 9.9;
        let g = gate.grad(&m, t, weight);
        let mut params: Vec<f64> = gate.weights.to_vec();
        params.push(gate.bias);
        let fd = central_diff(
            &|x: &[f64]| gate_loss(&x[..4], x[4], &m.0, t, weight),
            &params,
        );
        for (a, n) in g.weights.iter().chain(std::iter::once(&g.bias)).zip(&fd) {
            gate_err = gate_err.max((a - n).abs());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        im_err < FD_MAX_ERR && gate_err < FD_MAX_ERR && elapsed < FD_BUDGET,
        format!("max |err| IM {im_err:.2e}, gate {gate_err:.2e} (limit {FD_MAX_ERR:.0e}); {elapsed:.2?}"),
    )
}

fn exit_distribution_validity() -> Outcome {
    let mut rng = SeededRng::new(202);
    let mut worst_sum: f64 = 0.0;
    let mut worst_recompose: f64 = 0.0;
    let mut negative = 0usize;
    for _ in 0..DIST_SAMPLES {
        let l = 2 + rng.below(9);
        let g: Vec<f64> = (0..l - 1)
            .map(|_| match rng.below(10) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.uniform(),
            })
            .chain([1.0])
            .collect();
        let dist = exit_distribution(&g).expect("valid gates");
        negative += dist.p.iter().filter(|&&v| v < 0.0).count();
        worst_sum = worst_sum.max((dist.p.iter().sum::<f64>() - 1.0).abs());
        let e = exit_chain(&dist.p);
        let mut survive = 1.0;
        for (&ek, &pk) in e.iter().zip(&dist.p) {
            worst_recompose = worst_recompose.max((survive * ek - pk).abs());
            survive *= 1.0 - ek;
        }
    }
    outcome(
        negative == 0 && worst_sum <= DIST_TOL && worst_recompose <= DIST_TOL,
        format!("{DIST_SAMPLES} vectors: {negative} negative entries, max |sum-1| {worst_sum:.1e}, max recomposition error {worst_recompose:.1e}"),
    )
}

fn targets_as_gates_are_one_hot() -> Outcome {
    let mut checked = 0usize;
    let mut failures = Vec::new();
    for l_total in 2..=12 {
        for star in 1..=l_total {
            // Costs whose unique minimum is at `star`.
            let costs = GateCosts(
                (1..=l_total)
                    .map(|l| if l == star { 0.0 } else { 1.0 + l as f64 })
                    .collect(),
            );
            let t = surrogate_targets(&costs, TargetStrategy::ExitSubsequent);
            let mut g: Vec<f64> = t.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            g[l_total - 1] = 1.0;
            let p = exit_distribution(&g).expect("binary gates").p;
            let one_hot = p
                .iter()
                .enumerate()
                .all(|(k, &v)| if k + 1 == star { v == 1.0 } else { v == 0.0 });
            checked += 1;
            if !one_hot {
                failures.push(format!("L={l_total} l*={star} -> {p:?}"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("{checked} target shapes, exact one-hot; failures: {failures:?}"),
    )
}

fn cost_fixture() -> Outcome {
    let t = t2t_vit7_fixture();
    let mut im_cum = 0u64;
    let mut gate_cum = 0u64;
    let mut exact = true;
    for l in 0..t.layers() {
        im_cum += t.im_cost[l];
        gate_cum += t.gate_cost[l];
        let capped = (l as u64 + 1).min(6);
        exact &= im_cum == 2570 * capped && gate_cum == 96 * capped;
    }
    let base: u64 = t.layer_cost.iter().sum();
    let ratio = (t.ic[t.layers() - 1] - base) as f64 / base as f64;
    outcome(
        exact && ratio < OVERHEAD_LIMIT,
        format!(
            "IM +{im_cum}, gates +{gate_cum} at IC^7; overhead {:.5}% (limit {:.3}%)",
            ratio * 100.0,
            OVERHEAD_LIMIT * 100.0
        ),
    )
}

fn conformal_coverage() -> Outcome {
    let start = Instant::now();
    let mut report = Vec::new();
    let mut pass = true;
    for alpha in [0.05, 0.1] {
        let mut total = 0.0;
        for seed in 0..CONFORMAL_SEEDS {
            let mut rng = SeededRng::new(5000 + seed);
            let mut pool: Vec<ExitPrediction> = (0..2 * CONFORMAL_N)
                .map(|_| {
                    let exit = 1 + rng.below(3);
                    let probs: Vec<Vec<f64>> = (0..3)
                        .map(|_| {
                            let logits: Vec<f64> =
                                (0..CONFORMAL_K).map(|_| 1.5 * rng.normal()).collect();
                            eedn_core::math::softmax(&logits).expect("finite")
                        })
                        .collect();
                    let label = rng.categorical(&probs[exit - 1]);
                    ExitPrediction { probs, exit, label }
                })
                .collect();
            rng.shuffle(&mut pool);
            let (cal, test) = pool.split_at(CONFORMAL_N);
            let calibrator =
                conformal_thresholds(cal, ConformalStrategy::General, alpha).expect("non-empty");
            let covered = test
                .iter()
                .filter(|p| {
                    conformal_set(&p.probs[p.exit - 1], p.exit, &calibrator).contains(&p.label)
                })
                .count();
            total += covered as f64 / test.len() as f64;
        }
        let mean = total / CONFORMAL_SEEDS as f64;
        let lo = 1.0 - alpha - CONFORMAL_SLACK;
        pass &= mean >= lo && mean <= 1.0;
        report.push(format!("alpha {alpha}: {mean:.4} (>= {lo:.2})"));
    }
    let elapsed = start.elapsed();
    outcome(
        pass && elapsed < CONFORMAL_BUDGET,
        format!("{}; {elapsed:.2?}", report.join(", ")),
    )
}

fn ece_oracle_equivalence() -> Outcome {
    let mut rng = SeededRng::new(606);
    let mut worst: f64 = 0.0;
    for i in 0..ECE_DATASETS {
        let n = 1 + rng.below(400);
        let bins = 1 + rng.below(20);
        // Every other dataset uses coarse confidences so ties occur.
        let p: Vec<f64> = (0..n)
            .map(|_| {
                let v = 0.2 + 0.8 * rng.uniform();
                if i % 2 == 0 {
                    (v * 10.0).round() / 10.0
                } else {
                    v
                }
            })
            .collect();
        let correct: Vec<bool> = p.iter().map(|&v| rng.uniform() < v).collect();
        let got = ece(&p, &correct, bins).expect("valid input");
        worst = worst.max((got - ece_oracle(&p, &correct, bins)).abs());
    }
    outcome(
        worst <= ECE_TOL,
        format!("{ECE_DATASETS} datasets, max |diff| {worst:.1e}"),
    )
}

fn desk_trend() -> Outcome {
    let start = Instant::now();
    let data = synth_generate(&SynthConfig::desk_default(0)).expect("synthetic data");
    let costs = uniform_costs(&data.meta.dims, data.meta.classes);
    let cfg = TrainConfig {
        exec: ExecMode::Sequential,
        ..TrainConfig::default()
    };
    let eval = EvalConfig {
        exec: ExecMode::Sequential,
        ..EvalConfig::default()
    };
    let warm = warm_start(&data, &costs, &cfg).expect("warm-up");
    let grid = select_threshold_grid(&warm, &data.val1, TREND_THRESHOLDS);
    let baseline = threshold_gm_baseline(&warm, &grid, &data, &costs, &eval).expect("baseline");
    let curve: Vec<(f64, f64)> = baseline.iter().map(|p| (p.ic_norm, p.accuracy)).collect();
    let runs = sweep_from(&warm, &cfg, &data, &costs, &TREND_LAMBDAS, &eval).expect("sweep");
    let mut wins = 0;
    let mut cells = Vec::new();
    for r in &runs {
        let p = &r.point;
        let base = accuracy_at_cost(&curve, p.ic_norm).expect("non-empty curve");
        if p.accuracy >= base {
            wins += 1;
        }
        cells.push(format!(
            "λ={} cost {:.3} acc {:.4} vs {:.4}",
            p.lambda, p.ic_norm, p.accuracy, base
        ));
    }
    let elapsed = start.elapsed();
    outcome(
        wins >= TREND_MIN_WINS && elapsed < TREND_BUDGET,
        format!(
            "{wins}/4 points at or above baseline [{}]; {elapsed:.2?}",
            cells.join("; ")
        ),
    )
}

fn trained(
    lambda: f64,
) -> (
    eedn_core::ExitModel,
    eedn_core::backbone::DatasetSplit,
    CostTable,
) {
    let data = synth_generate(&SynthConfig::desk_default(0)).expect("synthetic data");
    let costs = uniform_costs(&data.meta.dims, data.meta.classes);
    let cfg = TrainConfig {
        lambda,
        ..TrainConfig::default()
    };
    let out = train(&data, &costs, &cfg).expect("training");
    (out.model, data, costs)
}

fn avg_ic_norm(model: &eedn_core::ExitModel, test: &[LayeredSample], costs: &CostTable) -> f64 {
    let exits: Vec<usize> = test
        .iter()
        .map(|s| eedn_core::decide_exit(s, model).layer)
        .collect();
    costs.average_cost_norm(&exits).expect("valid exits")
}

fn cost_monotonicity() -> Outcome {
    let (cheap_model, data, costs) = trained(10.0);
    let (rich_model, _, _) = trained(0.01);
    let hi = avg_ic_norm(&cheap_model, &data.test, &costs);
    let lo = avg_ic_norm(&rich_model, &data.test, &costs);
    outcome(
        hi <= lo,
        format!("avg ic_norm λ=10: {hi:.4}, λ=0.01: {lo:.4}"),
    )
}

fn mean_nll(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
            -log_softmax_at(&scaled, y)
        })
        .sum::<f64>()
        / logits.len() as f64
}

fn calibration_invariance() -> Outcome {
    let (model, data, _) = trained(1.0);
    let mut changed = 0usize;
    let mut worse = Vec::new();
    let mut temps = Vec::new();
    for im in &model.ims {
        let l = im.layer - 1;
        let logits: Vec<Vec<f64>> = data
            .val2
            .iter()
            .map(|s| im.logits(&s.z[l]).expect("dims"))
            .collect();
        let labels: Vec<usize> = data.val2.iter().map(|s| s.y).collect();
        let t = fit_temperature(&logits, &labels).expect("non-empty");
        temps.push(format!("{:.3}", t.temperature));
        let (before, after) = (
            mean_nll(&logits, &labels, 1.0),
            mean_nll(&logits, &labels, t.temperature),
        );
        if after > before {
            worse.push(format!("IM {}: {after} > {before}", im.layer));
        }
        for s in &data.test {
            let z = im.logits(&s.z[l]).expect("dims");
            let before = eedn_core::math::argmax(&z);
            let p = t.probs(&z);
            let top = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            // The calibrated prediction and the calibrated ranking must both keep the class.
            if t.predict(&z) != before || p[before] != top {
                changed += 1;
            }
        }
    }
    outcome(
        changed == 0 && worse.is_empty(),
        format!(
            "T = [{}]; {changed} changed predictions; NLL regressions {worse:?}",
            temps.join(", ")
        ),
    )
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .expect("readable dir")
        .map(|e| {
            let e = e.expect("entry");
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).expect("readable"),
            )
        })
        .collect();
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().expect("temp dir");
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_eedn"))
            .args(["train", "--seed", "7", "--out"])
            .arg(&out)
            .output()
            .expect("spawn eedn");
        (status.status.success(), out)
    };
    let (ok_a, a) = run("a");
    let (ok_b, b) = run("b");
    if !(ok_a && ok_b) {
        return outcome(false, "train exited with failure");
    }
    let ckpt_a = files_under(&a.join("checkpoint"));
    let same_ckpt = ckpt_a == files_under(&b.join("checkpoint"));
    let log_a = fs::read(a.join("train_log.jsonl")).expect("log");
    let same_log = log_a == fs::read(b.join("train_log.jsonl")).expect("log");
    outcome(
        same_ckpt && same_log && !log_a.is_empty(),
        format!(
            "{} checkpoint files identical: {same_ckpt}; {}-byte logs identical: {same_log}",
            ckpt_a.len(),
            log_a.len()
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient fidelity", gradient_fidelity),
        ("exit-distribution validity", exit_distribution_validity),
        (
            "surrogate targets as gates give one-hot exits",
            targets_as_gates_are_one_hot,
        ),
        ("T2T-ViT-7 cost fixture", cost_fixture),
        ("conformal coverage", conformal_coverage),
        ("ECE oracle equivalence", ece_oracle_equivalence),
        ("joint vs. threshold gating at matched cost", desk_trend),
        ("cost-penalty monotonicity", cost_monotonicity),
        ("calibration invariance", calibration_invariance),
        ("train determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {} {name}: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
