//! Joint training: frozen final head, warm-up of the intermediate IMs, then
//! alternating GATE / CLASSIFIER phases.
//!
//! In the GATE phase every sample gets per-exit costs
//! `C^l = CE(y, p^l) + λ·IC_norm^l` under the current IMs; the cheapest exit
//! `l*` defines binary targets and each gate is fit as an independent
//! (class-weighted) logistic regression. In the CLASSIFIER phase the gates are
//! held fixed and each intermediate IM minimises cross-entropy weighted by
//! `P(G = l | x)`. The dependence of the gates on the IM parameters is not
//! differentiated through.

use serde::{Deserialize, Serialize};

use crate::backbone::{DatasetSplit, LayeredSample};
use crate::branches::{ExitModel, GateGrad, ImGrad, InferenceModule};
use crate::cost::CostTable;
use crate::error::{Error, Result};
use crate::exit::{decide_exit, full_pass};
use crate::math::{self, SeededRng};
use crate::optim::{Adam, AdamConfig};
use crate::parallel::{chunked_fold, ExecMode};

/// Samples per partial sum in batch reductions; fixed so results do not depend
/// on the worker count.
pub const REDUCE_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TargetStrategy {
    /// `t_j = 1` for every `j >= l*`.
    #[default]
    ExitSubsequent,
    /// `t_j = 1` at `l*`, and after it only where no later exit is cheaper.
    ExitIfMin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Plain (full-batch capable) gradient descent with L2 decay.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Total epochs `E`, warm-up included.
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Batches spent in one state before switching GATE <-> CLASSIFIER.
    pub bi_switch: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub target_strategy: TargetStrategy,
    pub imbalance_weighting: bool,
    pub optimizer: OptimizerKind,
    /// Epochs used to fit the final (frozen) classifier head before warm-up.
    pub head_epochs: usize,
    /// Stop when the V^2 objective has not improved for this many epochs.
    pub early_stopping_patience: Option<usize>,
    pub exec: ExecMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            epochs: 20,
            warmup_epochs: 5,
            bi_switch: 10,
            batch_size: 64,
            lr0: 0.01,
            weight_decay: 5e-4,
            target_strategy: TargetStrategy::ExitSubsequent,
            imbalance_weighting: true,
            optimizer: OptimizerKind::Adam,
            head_epochs: 20,
            early_stopping_patience: None,
            exec: ExecMode::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and >= 0");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be smaller than epochs");
        }
        if self.bi_switch == 0 {
            return bad("bi_switch must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// One optimiser per parameter group.
#[derive(Debug, Clone)]
enum Optimizer {
    Adam(Adam),
    Sgd { weight_decay: f64 },
}

impl Optimizer {
    fn new(cfg: &TrainConfig, len: usize) -> Self {
        match cfg.optimizer {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(cfg.adam(), len)),
            OptimizerKind::Sgd => Optimizer::Sgd {
                weight_decay: cfg.weight_decay,
            },
        }
    }

    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        match self {
            Optimizer::Adam(a) => a.step(params, grads, lr),
            Optimizer::Sgd { weight_decay } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, gi) in p.iter_mut().zip(g.iter()) {
                        *w -= lr * (gi + *weight_decay * *w);
                    }
                }
            }
        }
    }
}

fn step_im(opt: &mut Optimizer, im: &mut InferenceModule, g: &ImGrad, scale: f64, lr: f64) {
    let gw: Vec<f64> = g.weights.as_slice().iter().map(|v| v * scale).collect();
    let gb: Vec<f64> = g.bias.iter().map(|v| v * scale).collect();
    im.apply_mut(|w, b| opt.step(&mut [w, b], &[&gw, &gb], lr));
}

/// Per-exit costs `C^l` of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GateCosts(pub Vec<f64>);

impl GateCosts {
    /// Cheapest exit (0-based), ties broken toward the earliest.
    pub fn best_exit(&self) -> usize {
        let mut best = 0;
        for (l, &c) in self.0.iter().enumerate().skip(1) {
            if c < self.0[best] {
                best = l;
            }
        }
        best
    }
}

pub fn costs_from_probs(probs: &[Vec<f64>], y: usize, table: &CostTable, lambda: f64) -> GateCosts {
    GateCosts(
        probs
            .iter()
            .zip(&table.ic_norm)
            .map(|(p, &ic)| -p[y].max(math::PROB_FLOOR).ln() + lambda * ic)
            .collect(),
    )
}

pub fn gate_costs(
    sample: &LayeredSample,
    ims: &[InferenceModule],
    table: &CostTable,
    lambda: f64,
) -> GateCosts {
    let probs: Vec<Vec<f64>> = ims
        .iter()
        .zip(&sample.z)
        .map(|(im, z)| im.forward_unchecked(z))
        .collect();
    costs_from_probs(&probs, sample.y, table, lambda)
}

pub fn surrogate_targets(costs: &GateCosts, strategy: TargetStrategy) -> Vec<bool> {
    let c = &costs.0;
    let best = costs.best_exit();
    match strategy {
        TargetStrategy::ExitSubsequent => (0..c.len()).map(|j| j >= best).collect(),
        TargetStrategy::ExitIfMin => (0..c.len())
            .map(|j| j == best || (j > best && c[j + 1..].iter().all(|&later| c[j] < later)))
            .collect(),
    }
}

/// Positive-class weight per gate, `clamp(n_neg / n_pos, 0.1, 10)`, or 1 when
/// either class is absent. `targets[i][l]` is sample `i`'s target at gate `l`.
pub fn imbalance_weights(targets: &[Vec<bool>], gates: usize) -> Vec<f64> {
    (0..gates)
        .map(|l| {
            let pos = targets.iter().filter(|t| t[l]).count();
            let neg = targets.len() - pos;
            if pos == 0 || neg == 0 {
                1.0
            } else {
                (neg as f64 / pos as f64).clamp(0.1, 10.0)
            }
        })
        .collect()
}

/// Joint objective `mean_i Σ_l C^l_i P(G=l|x_i)`.
pub fn objective(
    model: &ExitModel,
    samples: &[LayeredSample],
    table: &CostTable,
    lambda: f64,
    exec: ExecMode,
) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let total = chunked_fold(
        exec,
        samples,
        REDUCE_CHUNK,
        || 0.0,
        |acc, s| {
            let pass = full_pass(model, s);
            let c = costs_from_probs(&pass.probs, s.y, table, lambda);
            *acc += math::dot(&c.0, &pass.exit_probs);
        },
        |a, b| *a += b,
    );
    total / samples.len() as f64
}

fn batches<'a>(
    samples: &'a [LayeredSample],
    batch_size: usize,
    rng: &mut SeededRng,
) -> Vec<Vec<&'a LayeredSample>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size)
        .map(|c| c.iter().map(|&i| &samples[i]).collect())
        .collect()
}

/// Fits the final IM on plain cross-entropy; it stays frozen afterwards and
/// stands in for the pretrained backbone classifier.
pub fn fit_final_head(model: &mut ExitModel, train: &[LayeredSample], cfg: &TrainConfig) {
    let last = model.layers() - 1;
    let mut opt = Optimizer::new(cfg, model.ims[last].classes() * (model.ims[last].dim() + 1));
    for epoch in 0..cfg.head_epochs {
        let mut rng = SeededRng::derive(cfg.seed, 0x100 + epoch as u64);
        for batch in batches(train, cfg.batch_size, &mut rng) {
            let im = &model.ims[last];
            let g = chunked_fold(
                cfg.exec,
                &batch,
                REDUCE_CHUNK,
                || ImGrad::zeros(im.classes(), im.dim()),
                |acc, s| {
                    let p = im.forward_unchecked(&s.z[last]);
                    im.accumulate_grad(&s.z[last], &p, s.y, 1.0, acc);
                },
                |a, b| a.add(&b),
            );
            step_im(
                &mut opt,
                &mut model.ims[last],
                &g,
                1.0 / batch.len() as f64,
                cfg.lr0,
            );
        }
    }
}

/// Fresh model: seeded IM init, neutral gates, fitted final head.
pub fn init_model(data: &DatasetSplit, cfg: &TrainConfig) -> ExitModel {
    let mut rng = SeededRng::derive(cfg.seed, 0x10);
    let mut model = ExitModel::init(data.meta.classes, &data.meta.dims, &mut rng);
    fit_final_head(&mut model, &data.train, cfg);
    model
}

/// Optimiser state of the warm-up phase.
pub struct Warmup {
    opts: Vec<Optimizer>,
}

impl Warmup {
    pub fn new(model: &ExitModel, cfg: &TrainConfig) -> Self {
        let opts = model.ims[..model.layers() - 1]
            .iter()
            .map(|im| Optimizer::new(cfg, im.classes() * (im.dim() + 1)))
            .collect();
        Self { opts }
    }

    /// Step size of IM `layer` (1-based): `(L - l) · lr0`.
    pub fn lr_scale(layers: usize, layer: usize, lr0: f64) -> f64 {
        (layers - layer) as f64 * lr0
    }

    /// One batch: every non-final IM on plain cross-entropy.
    pub fn step(&mut self, model: &mut ExitModel, batch: &[&LayeredSample], cfg: &TrainConfig) {
        let l_total = model.layers();
        let grads = {
            let ims = &model.ims;
            chunked_fold(
                cfg.exec,
                batch,
                REDUCE_CHUNK,
                || {
                    ims[..l_total - 1]
                        .iter()
                        .map(|im| ImGrad::zeros(im.classes(), im.dim()))
                        .collect::<Vec<_>>()
                },
                |acc, s| {
                    for (l, g) in acc.iter_mut().enumerate() {
                        let p = ims[l].forward_unchecked(&s.z[l]);
                        ims[l].accumulate_grad(&s.z[l], &p, s.y, 1.0, g);
                    }
                },
                |a, b| a.iter_mut().zip(&b).for_each(|(x, y)| x.add(y)),
            )
        };
        let inv = 1.0 / batch.len() as f64;
        for (l, g) in grads.iter().enumerate() {
            let lr = Self::lr_scale(l_total, l + 1, cfg.lr0);
            step_im(&mut self.opts[l], &mut model.ims[l], g, inv, lr);
        }
    }

    pub fn epoch(
        &mut self,
        model: &mut ExitModel,
        samples: &[LayeredSample],
        cfg: &TrainConfig,
        epoch: usize,
    ) -> usize {
        let mut rng = SeededRng::derive(cfg.seed, 0x200 + epoch as u64);
        let bs = batches(samples, cfg.batch_size, &mut rng);
        for batch in &bs {
            self.step(model, batch, cfg);
        }
        bs.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Gate,
    Classifier,
}

/// Parameters plus optimiser state of the alternating phase.
pub struct Bilevel<'a> {
    pub model: ExitModel,
    im_opts: Vec<Optimizer>,
    gate_opts: Vec<Optimizer>,
    /// Positive-class weight per gate.
    pub pos_weights: Vec<f64>,
    cfg: &'a TrainConfig,
    costs: &'a CostTable,
}

impl<'a> Bilevel<'a> {
    pub fn new(model: ExitModel, cfg: &'a TrainConfig, costs: &'a CostTable) -> Self {
        let l = model.layers();
        let im_opts = model.ims[..l - 1]
            .iter()
            .map(|im| Optimizer::new(cfg, im.classes() * (im.dim() + 1)))
            .collect();
        let gate_opts = (0..l - 1).map(|_| Optimizer::new(cfg, 5)).collect();
        Self {
            model,
            im_opts,
            gate_opts,
            pos_weights: vec![1.0; l - 1],
            cfg,
            costs,
        }
    }

    /// Recomputes the per-gate positive weights from targets on `samples`.
    pub fn refresh_imbalance(&mut self, samples: &[LayeredSample]) {
        let gates = self.model.layers() - 1;
        if !self.cfg.imbalance_weighting || samples.is_empty() {
            self.pos_weights = vec![1.0; gates];
            return;
        }
        let targets: Vec<Vec<bool>> = crate::parallel::map_collect(self.cfg.exec, samples, |s| {
            let c = gate_costs(s, &self.model.ims, self.costs, self.cfg.lambda);
            surrogate_targets(&c, self.cfg.target_strategy)
        });
        self.pos_weights = imbalance_weights(&targets, gates);
    }

    /// Summed surrogate-loss gradients of every gate over `batch`.
    pub fn gate_gradients(&self, batch: &[&LayeredSample]) -> Vec<GateGrad> {
        let gates = self.model.layers() - 1;
        let model = &self.model;
        chunked_fold(
            self.cfg.exec,
            batch,
            REDUCE_CHUNK,
            || vec![GateGrad::default(); gates],
            |acc, s| {
                let pass = full_pass(model, s);
                let c = costs_from_probs(&pass.probs, s.y, self.costs, self.cfg.lambda);
                let t = surrogate_targets(&c, self.cfg.target_strategy);
                for (l, g) in acc.iter_mut().enumerate() {
                    let (target, w) = if t[l] {
                        (1.0, self.pos_weights[l])
                    } else {
                        (0.0, 1.0)
                    };
                    g.add(&model.gates[l].grad(&pass.features[l], target, w));
                }
            },
            |a, b| a.iter_mut().zip(&b).for_each(|(x, y)| x.add(y)),
        )
    }

    /// Weighted surrogate loss over `batch` (mean over samples, summed over gates).
    pub fn gate_loss(&self, batch: &[&LayeredSample]) -> f64 {
        let gates = self.model.layers() - 1;
        let total: f64 = batch
            .iter()
            .map(|s| {
                let pass = full_pass(&self.model, s);
                let c = costs_from_probs(&pass.probs, s.y, self.costs, self.cfg.lambda);
                let t = surrogate_targets(&c, self.cfg.target_strategy);
                (0..gates)
                    .map(|l| {
                        let (target, w) = if t[l] {
                            (1.0, self.pos_weights[l])
                        } else {
                            (0.0, 1.0)
                        };
                        w * math::binary_cross_entropy(pass.gates[l], target)
                    })
                    .sum::<f64>()
            })
            .sum();
        total / batch.len() as f64
    }

    pub fn train_gates_step(&mut self, batch: &[&LayeredSample]) {
        if batch.is_empty() {
            return;
        }
        let grads = self.gate_gradients(batch);
        let inv = 1.0 / batch.len() as f64;
        for ((gate, g), opt) in self
            .model
            .gates
            .iter_mut()
            .zip(&grads)
            .zip(&mut self.gate_opts)
        {
            let gw: Vec<f64> = g.weights.iter().map(|v| v * inv).collect();
            let gb = [g.bias * inv];
            gate.apply_mut(|w, b| opt.step(&mut [w, b], &[&gw, &gb], self.cfg.lr0));
        }
    }

    /// Summed `P(G=l|x)`-weighted cross-entropy gradients of the non-final IMs.
    pub fn im_gradients(&self, batch: &[&LayeredSample]) -> Vec<ImGrad> {
        let l_total = self.model.layers();
        let model = &self.model;
        chunked_fold(
            self.cfg.exec,
            batch,
            REDUCE_CHUNK,
            || {
                model.ims[..l_total - 1]
                    .iter()
                    .map(|im| ImGrad::zeros(im.classes(), im.dim()))
                    .collect::<Vec<_>>()
            },
            |acc, s| {
                let pass = full_pass(model, s);
                for (l, g) in acc.iter_mut().enumerate() {
                    model.ims[l].accumulate_grad(
                        &s.z[l],
                        &pass.probs[l],
                        s.y,
                        pass.exit_probs[l],
                        g,
                    );
                }
            },
            |a, b| a.iter_mut().zip(&b).for_each(|(x, y)| x.add(y)),
        )
    }

    pub fn train_ims_step(&mut self, batch: &[&LayeredSample]) {
        if batch.is_empty() {
            return;
        }
        let grads = self.im_gradients(batch);
        let inv = 1.0 / batch.len() as f64;
        for ((im, g), opt) in self.model.ims.iter_mut().zip(&grads).zip(&mut self.im_opts) {
            step_im(opt, im, g, inv, self.cfg.lr0);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// One character per batch: `W` warm-up, `G` gate, `C` classifier.
    pub state_schedule: String,
    pub train_loss: f64,
    pub val_acc: f64,
    pub avg_ic_norm: f64,
    pub gate_usage: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ExitModel,
    pub log: Vec<EpochLog>,
}

fn epoch_log(
    epoch: usize,
    schedule: String,
    model: &ExitModel,
    data: &DatasetSplit,
    costs: &CostTable,
    cfg: &TrainConfig,
) -> Result<EpochLog> {
    let train_loss = objective(model, &data.train, costs, cfg.lambda, cfg.exec);
    if !train_loss.is_finite() {
        return Err(Error::Divergence {
            epoch,
            detail: format!("training loss is {train_loss} (lambda = {})", cfg.lambda),
        });
    }
    let l = model.layers();
    let decisions = crate::parallel::map_collect(cfg.exec, &data.val2, |s| {
        let d = decide_exit(s, model);
        (d.layer, d.prediction == s.y)
    });
    let n = decisions.len().max(1) as f64;
    let mut usage = vec![0.0; l];
    let mut correct = 0usize;
    let mut ic = 0.0;
    for &(layer, ok) in &decisions {
        usage[layer - 1] += 1.0 / n;
        correct += ok as usize;
        ic += costs.ic_norm[layer - 1];
    }
    Ok(EpochLog {
        epoch,
        state_schedule: schedule,
        train_loss,
        val_acc: correct as f64 / n,
        avg_ic_norm: ic / n,
        gate_usage: usage,
    })
}

/// Runs `cfg.warmup_epochs` of warm-up on `model`, returning one log entry
/// per epoch.
pub fn warmup(
    model: &mut ExitModel,
    data: &DatasetSplit,
    costs: &CostTable,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    let mut state = Warmup::new(model, cfg);
    let mut log = Vec::with_capacity(cfg.warmup_epochs);
    for e in 0..cfg.warmup_epochs {
        let n = state.epoch(model, &data.train, cfg, e);
        log.push(epoch_log(e + 1, "W".repeat(n), model, data, costs, cfg)?);
    }
    Ok(log)
}

/// Alternating phase over `E - WE` epochs starting in GATE, from a warmed-up
/// model. Epoch numbers in the log continue after warm-up.
pub fn bilevel_train(
    warm: ExitModel,
    data: &DatasetSplit,
    costs: &CostTable,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if costs.layers() != warm.layers() {
        return Err(Error::Config(format!(
            "cost table has {} exits but the model has {}",
            costs.layers(),
            warm.layers()
        )));
    }
    let frozen_head = warm.final_im().clone();
    let mut state = Bilevel::new(warm, cfg, costs);
    let mut phase = Phase::Gate;
    let mut in_phase = 0usize;
    let mut log = Vec::new();
    let mut best: Option<(f64, ExitModel)> = None;
    let mut stale = 0usize;

    for e in cfg.warmup_epochs..cfg.epochs {
        state.refresh_imbalance(&data.val1);
        let mut rng = SeededRng::derive(cfg.seed, 0x1000 + e as u64);
        let mut schedule = String::new();
        for batch in batches(&data.train, cfg.batch_size, &mut rng) {
            match phase {
                Phase::Gate => {
                    schedule.push('G');
                    state.train_gates_step(&batch);
                }
                Phase::Classifier => {
                    schedule.push('C');
                    state.train_ims_step(&batch);
                }
            }
            in_phase += 1;
            if in_phase == cfg.bi_switch {
                in_phase = 0;
                phase = match phase {
                    Phase::Gate => Phase::Classifier,
                    Phase::Classifier => Phase::Gate,
                };
            }
        }
        log.push(epoch_log(e + 1, schedule, &state.model, data, costs, cfg)?);

        if let Some(patience) = cfg.early_stopping_patience {
            let val_loss = objective(&state.model, &data.val2, costs, cfg.lambda, cfg.exec);
            match &best {
                Some((b, _)) if val_loss >= *b => {
                    stale += 1;
                    if stale >= patience {
                        break;
                    }
                }
                _ => {
                    best = Some((val_loss, state.model.clone()));
                    stale = 0;
                }
            }
        }
    }
    debug_assert_eq!(state.model.final_im(), &frozen_head);
    let model = match best {
        Some((_, m)) => m,
        None => state.model,
    };
    Ok(TrainOutcome { model, log })
}

/// Head fit, warm-up and the alternating phase.
pub fn train(data: &DatasetSplit, costs: &CostTable, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = init_model(data, cfg);
    let mut log = warmup(&mut model, data, costs, cfg)?;
    let out = bilevel_train(model, data, costs, cfg)?;
    log.extend(out.log);
    Ok(TrainOutcome {
        model: out.model,
        log,
    })
}
