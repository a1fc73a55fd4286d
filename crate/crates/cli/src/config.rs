//! Run configuration: one JSON document, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use eedn_core::backbone::{DatasetMeta, SynthConfig};
use eedn_core::cost::{CostTable, DEFAULT_GATE_FEATURE_OPS};
use eedn_core::evaluation::EvalConfig;
use eedn_core::uncertainty::{ConformalStrategy, DEFAULT_ECE_BINS};
use eedn_core::{ExitRule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::Invalid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synth(SynthConfig),
    /// Path to an activation manifest.
    Manifest(PathBuf),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synth(SynthConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Expected shape; checked against the dataset when set.
    pub layers: Option<usize>,
    pub classes: Option<usize>,
    pub dims: Option<Vec<usize>>,
    /// Backbone Mul-Adds of each layer; uniform when omitted.
    pub layer_cost: Option<Vec<u64>>,
    pub gate_feature_ops: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layers: None,
            classes: None,
            dims: None,
            layer_cost: None,
            gate_feature_ops: DEFAULT_GATE_FEATURE_OPS,
        }
    }
}

const UNIFORM_LAYER_COST: u64 = 1000;

impl ModelSection {
    pub fn check(&self, meta: &DatasetMeta) -> anyhow::Result<()> {
        let mismatch = |field: &str, want: String, got: String| {
            Invalid(format!("model.{field} is {want} but the dataset has {got}"))
        };
        if let Some(l) = self.layers {
            if l != meta.layers {
                return Err(mismatch("layers", l.to_string(), meta.layers.to_string()).into());
            }
        }
        if let Some(k) = self.classes {
            if k != meta.classes {
                return Err(mismatch("classes", k.to_string(), meta.classes.to_string()).into());
            }
        }
        if let Some(d) = &self.dims {
            if d != &meta.dims {
                return Err(mismatch("dims", format!("{d:?}"), format!("{:?}", meta.dims)).into());
            }
        }
        if let Some(c) = &self.layer_cost {
            if c.len() != meta.layers {
                return Err(Invalid(format!(
                    "model.layer_cost has {} entries for {} layers",
                    c.len(),
                    meta.layers
                ))
                .into());
            }
        }
        Ok(())
    }

    pub fn cost_table(&self, meta: &DatasetMeta) -> anyhow::Result<CostTable> {
        self.check(meta)?;
        let layer_cost = self
            .layer_cost
            .clone()
            .unwrap_or_else(|| vec![UNIFORM_LAYER_COST; meta.layers]);
        Ok(CostTable::for_branches(
            &layer_cost,
            &meta.dims,
            meta.classes,
            self.gate_feature_ops,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintySection {
    pub alpha: f64,
    pub strategy: ConformalStrategy,
    pub bins: usize,
    pub temperature_scaling: bool,
    pub conformal_exit: ExitRule,
}

impl Default for UncertaintySection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            alpha: e.alpha,
            strategy: e.strategy,
            bins: DEFAULT_ECE_BINS,
            temperature_scaling: e.temperature_scaling,
            conformal_exit: e.conformal_exit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds data generation, initialisation and exit sampling alike.
    pub seed: u64,
    pub dataset: DatasetSource,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub uncertainty: UncertaintySection,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSource::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            uncertainty: UncertaintySection::default(),
            output_dir: PathBuf::from("eedn-out"),
        }
    }
}

impl RunConfig {
    /// Parses a config file, reporting the offending field path and position.
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())).into())
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let inner = e.into_inner();
            format!("field `{field}`: {inner}")
        })
    }

    /// Pushes the run seed into every section and checks all values.
    pub fn finalize(mut self) -> anyhow::Result<Self> {
        self.train.seed = self.seed;
        if let DatasetSource::Synth(s) = &mut self.dataset {
            s.seed = self.seed;
            s.validate()
                .map_err(|e| Invalid(format!("dataset.synth: {e}")))?;
        }
        self.train
            .validate()
            .map_err(|e| Invalid(format!("train: {e}")))?;
        let u = &self.uncertainty;
        if !(u.alpha > 0.0 && u.alpha < 1.0) {
            return Err(Invalid("uncertainty.alpha must lie in (0, 1)".into()).into());
        }
        if u.bins == 0 {
            return Err(Invalid("uncertainty.bins must be >= 1".into()).into());
        }
        if let Some(c) = &self.model.layer_cost {
            if c.contains(&0) {
                return Err(Invalid("model.layer_cost entries must be positive".into()).into());
            }
        }
        Ok(self)
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            alpha: self.uncertainty.alpha,
            strategy: self.uncertainty.strategy,
            bins: self.uncertainty.bins,
            conformal_exit: self.uncertainty.conformal_exit,
            temperature_scaling: self.uncertainty.temperature_scaling,
            seed: self.seed,
            exec: self.train.exec,
        }
    }
}
