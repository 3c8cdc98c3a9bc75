use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{eeg, jura};
use crate::error::{Error, Result};
use crate::graph::GraphSpec;
use crate::likelihoods::LikelihoodConfig;
use crate::training::{TrainConfig, DEFAULT_PREDICT_SAMPLES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Synthetic,
    Jura,
    Eeg,
}

/// Where the training (and optional evaluation) data of an experiment comes
/// from. File names are relative to the data directory given at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataBinding {
    /// Generic table: one row per input location, empty or `NA` cells are
    /// unobserved.
    Csv {
        train: String,
        #[serde(default)]
        test: Option<String>,
        /// Input columns, in graph input order.
        inputs: Vec<String>,
        /// Observation columns per node.
        nodes: BTreeMap<String, Vec<String>>,
        /// Columns to z-score with training statistics.
        #[serde(default)]
        standardize: Vec<String>,
    },
    Jura {
        #[serde(default = "jura_train")]
        train: String,
        #[serde(default = "jura_val")]
        val: String,
    },
    Eeg {
        #[serde(default = "eeg_file")]
        file: String,
    },
}

fn jura_train() -> String {
    jura::TRAIN_FILE.into()
}
fn jura_val() -> String {
    jura::VAL_FILE.into()
}
fn eeg_file() -> String {
    "eeg.csv".into()
}
fn predict_samples() -> usize {
    DEFAULT_PREDICT_SAMPLES
}

/// A complete experiment: graph, optimizer settings and data binding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub preset: Option<Preset>,
    pub graph: GraphSpec,
    pub training: TrainConfig,
    pub data: DataBinding,
    /// Monte-Carlo samples used for prediction and evaluation.
    #[serde(default = "predict_samples")]
    pub predict_samples: usize,
}

impl ExperimentConfig {
    /// Parses a config document. When it names a preset, the document is
    /// merged over the preset defaults: objects key by key, anything else
    /// replaced whole.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let preset = match user.get("preset") {
            None | Some(Value::Null) => None,
            Some(p) => Some(serde_json::from_value::<Preset>(p.clone()).map_err(|e| Error::Config(format!("preset: {e}")))?),
        };
        let merged = match preset {
            Some(p) => {
                let mut base = preset_value(p);
                merge(&mut base, user);
                base
            }
            None => user,
        };
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(p: Preset) -> Self {
        let cfg: Self = serde_json::from_value(preset_value(p)).expect("preset parses");
        cfg.validate().expect("preset is valid");
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        self.training.validate()?;
        if self.predict_samples == 0 {
            return Err(Error::Config("predict_samples must be at least 1".into()));
        }
        if let DataBinding::Csv { inputs, nodes, .. } = &self.data {
            if inputs.len() != self.graph.input_dim {
                return Err(Error::Config(format!(
                    "{} input columns bound for a graph with input_dim {}",
                    inputs.len(),
                    self.graph.input_dim
                )));
            }
            for (name, cols) in nodes {
                let i = self
                    .graph
                    .index_of(name)
                    .ok_or_else(|| Error::Config(format!("data bound to unknown node `{name}`")))?;
                let want = self.graph.nodes[i].likelihood.as_ref().map_or(cols.len(), LikelihoodConfig::observed_dim);
                if cols.len() != want {
                    return Err(Error::Config(format!("node `{name}`: {} columns bound, likelihood expects {want}", cols.len())));
                }
            }
        }
        Ok(())
    }

    /// The same experiment with every likelihood except those of `keep`
    /// removed, e.g. a deep GP baseline that only sees the final output.
    pub fn keep_likelihoods(&self, keep: &[&str]) -> Self {
        let mut out = self.clone();
        for n in &mut out.graph.nodes {
            if !keep.contains(&n.name.as_str()) {
                n.likelihood = None;
            }
        }
        out
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Default document of a preset.
pub fn preset_value(p: Preset) -> Value {
    match p {
        Preset::Synthetic => json!({
            "preset": "synthetic",
            "graph": {
                "input_dim": 1,
                "nodes": [
                    {"name": "f1", "inputs": [0], "inducing": 40, "likelihood": {"kind": "gaussian"},
                     "whiten": true, "lengthscale": 0.05},
                    {"name": "f2", "parents": ["f1"], "inputs": [0], "inducing": 40, "likelihood": {"kind": "bernoulli"},
                     "whiten": true, "lengthscale": 0.05, "parent_lengthscale": 0.3},
                    {"name": "f3", "parents": ["f1", "f2"], "inputs": [0], "inducing": 40, "likelihood": {"kind": "gaussian"},
                     "whiten": true, "lengthscale": 0.05, "parent_lengthscale": 0.3}
                ]
            },
            "training": {"loss": "pll", "method": "ancestor-wise", "lr": 0.02, "epochs": 2000, "samples": 10, "beta": 0.5, "seed": 0},
            "data": {
                "format": "csv",
                "train": "train.csv",
                "test": "test.csv",
                "inputs": ["x"],
                "nodes": {"f1": ["y1"], "f2": ["y2"], "f3": ["y3"]},
                "standardize": ["y1", "y3"]
            }
        }),
        Preset::Jura => json!({
            "preset": "jura",
            "graph": {
                "input_dim": 2,
                "nodes": [
                    {"name": jura::ROCK, "inputs": [0, 1], "latent_dim": 2, "inducing": 259, "whiten": true,
                     "likelihood": {"kind": "softmax", "classes": jura::ROCK_CLASSES}},
                    {"name": jura::LAND, "inputs": [0, 1], "latent_dim": 2, "inducing": 259, "whiten": true,
                     "likelihood": {"kind": "softmax", "classes": jura::LAND_CLASSES}},
                    {"name": jura::MINERALS, "parents": [jura::LAND, jura::ROCK], "latent_dim": 3, "inducing": 259, "whiten": true,
                     "likelihood": {"kind": "multitask-gaussian", "tasks": 3}}
                ]
            },
            "training": {"loss": "pll", "method": "ancestor-wise", "lr": 0.01, "epochs": 200, "partial_epochs": 50,
                         "samples": 20, "beta": 2.5, "seed": 0},
            "data": {"format": "jura"}
        }),
        Preset::Eeg => json!({
            "preset": "eeg",
            "graph": {
                "input_dim": 1,
                "nodes": [
                    {"name": eeg::SOURCE, "inputs": [0], "latent_dim": 4, "inducing": 256, "freeze_inducing": true, "whiten": true,
                     "likelihood": {"kind": "multitask-gaussian", "tasks": 4}},
                    {"name": eeg::TARGET, "parents": [eeg::SOURCE], "latent_dim": 3, "inducing": 256, "whiten": true,
                     "likelihood": {"kind": "multitask-gaussian", "tasks": 3}}
                ]
            },
            "training": {"loss": "pll", "method": "ancestor-wise", "lr": 0.02, "epochs": 300, "partial_epochs": 150,
                         "samples": 20, "beta": 1.0, "seed": 0},
            "data": {"format": "eeg"}
        }),
    }
}
