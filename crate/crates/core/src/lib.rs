//! Early-exit classification on top of a frozen layered backbone.
//!
//! Each intermediate layer gets a small softmax classifier (IM) and a
//! sigmoid gate that decides whether to stop there. IMs and gates are trained
//! jointly against a per-sample cost that trades cross-entropy for Mul-Adds,
//! then calibrated with temperature scaling and conformal prediction sets.

pub mod backbone;
pub mod branches;
pub mod cost;
pub mod error;
pub mod evaluation;
pub mod exit;
pub mod math;
pub mod optim;
pub mod parallel;
pub mod trainer;
pub mod uncertainty;

pub use backbone::{
    load_activations, save_activations, synth_generate, DatasetSplit, LayeredSample, SynthConfig,
};
pub use branches::{
    gate_features, load_checkpoint, save_checkpoint, ExitModel, Gate, InferenceModule,
};
pub use cost::{build_cost_table, CostTable};
pub use error::{Error, Result};
pub use exit::{decide_exit, exit_distribution, sample_exit, ExitDecision, ExitRule};
pub use parallel::ExecMode;
pub use trainer::{train, TrainConfig, TrainOutcome};
