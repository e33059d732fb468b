//! Flat `key = value` run configuration.
//!
//! Grammar: one `key = value` pair per line; `#` starts a comment; blank lines
//! are ignored; keys are dotted lowercase identifiers; list values are
//! comma-separated. Later assignments override earlier ones, which is how command
//! line flags are layered on top of a file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bounds::BoundConfig;
use crate::error::{Error, Result};
use crate::model::Activation;
use crate::pruner::{Procedure, PruneConfig, TauPolicy, WidthPolicy};
use crate::spectral::LAMBDA_COEF_PRUNE;
use crate::trainer::{Loss, TrainConfig};

/// Step size used for MNIST when `train.learning_rate` is empty.
pub const MNIST_LEARNING_RATE: f64 = 0.05;
/// Step size used for synthetic data when `train.learning_rate` is empty.
pub const SYNTH_LEARNING_RATE: f64 = 0.005;

/// Every accepted key with its default (empty means unset).
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("data.source", "mnist"),
    ("data.images", "data/mnist/mnist10k-images-idx3-ubyte.gz"),
    ("data.labels", "data/mnist/mnist10k-labels-idx1-ubyte.gz"),
    ("data.limit", "10000"),
    ("data.train", ""),
    ("synth.n", "10000"),
    ("synth.d", "784"),
    ("synth.decay", "0.5"),
    ("model.hidden", "300,1000,300"),
    ("model.activation", "relu"),
    ("train.epochs", "10"),
    ("train.batch_size", "64"),
    ("train.learning_rate", ""),
    ("train.weight_decay", "1e-4"),
    ("train.loss", ""),
    ("prune.layers", ""),
    ("prune.widths", ""),
    ("prune.lambda_coef", ""),
    ("prune.theta", "0.5"),
    ("prune.procedure", "backward"),
    ("prune.budget_constraint", "true"),
    ("prune.tau", "leverage"),
    ("prune.default_lambda_coef", "1e-6"),
    ("bound.c1", "1"),
    ("bound.big_c1", "1"),
    ("bound.t", "1"),
    ("bound.truncation", ""),
    ("bound.rho", ""),
    ("sweep.kind", "width"),
    ("sweep.layer", ""),
    ("sweep.values", ""),
    ("sweep.width", ""),
    ("spectrum.layers", ""),
];

/// Raw key/value pairs with every known key present.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl Default for KvConfig {
    fn default() -> Self {
        KvConfig {
            entries: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl KvConfig {
    /// Defaults overridden by the assignments in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = KvConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidParameter(format!("line {}: expected `key = value`, got {raw:?}", no + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::InvalidParameter(format!("line {}: {e}", no + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        match self.entries.get_mut(key) {
            Some(slot) => {
                *slot = value.into();
                Ok(())
            }
            None => Err(Error::InvalidParameter(format!("unknown key {key:?}"))),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    /// Canonical text form; parsing it yields the same configuration.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::InvalidParameter(format!("{key} = {v:?}: {e}"))))
            .transpose()
    }

    fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| Error::InvalidParameter(format!("{key} must be set")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    let s = s.trim();
                    s.parse::<T>().map_err(|e| Error::InvalidParameter(format!("{key}: {s:?}: {e}")))
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSpec {
    Mnist { images: PathBuf, labels: PathBuf, limit: usize },
    Synth { n: usize, d: usize, decay: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Width,
    Theta,
    LambdaCoef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub kind: SweepKind,
    /// Node layer being swept; defaults to the first pruned layer.
    pub layer: Option<usize>,
    pub values: Vec<f64>,
    /// Width held fixed in θ and λ sweeps.
    pub width: Option<usize>,
}

/// Typed view of a [`KvConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSpec,
    /// Leading examples used for training; the rest form the test split.
    pub train_count: Option<usize>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub bound: BoundConfig,
    pub sweep: SweepSpec,
    pub spectrum_layers: Vec<usize>,
}

fn parse_activation(v: &str) -> Result<Activation> {
    match v.split_once(':') {
        None if v == "relu" => Ok(Activation::Relu),
        None if v == "none" => Ok(Activation::None),
        None if v == "leaky_relu" => Ok(Activation::LeakyRelu { slope: 0.01 }),
        Some(("leaky_relu", s)) => s
            .trim()
            .parse()
            .map(|slope| Activation::LeakyRelu { slope })
            .map_err(|e| Error::InvalidParameter(format!("leaky_relu slope {s:?}: {e}"))),
        _ => Err(Error::InvalidParameter(format!("unknown activation {v:?}"))),
    }
}

fn parse_loss(v: &str) -> Result<Loss> {
    match v {
        "cross_entropy" => Ok(Loss::SoftmaxCrossEntropy),
        "squared" => Ok(Loss::Squared),
        _ => Err(Error::InvalidParameter(format!("unknown loss {v:?}; use cross_entropy or squared"))),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::InvalidParameter(format!("{key} = {v:?} is not a boolean"))),
    }
}

impl ExperimentConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let seed: u64 = kv.require("seed")?;
        let source = kv.raw("data.source").unwrap_or("mnist");
        let data = match source {
            "mnist" => DataSpec::Mnist {
                images: kv.require("data.images")?,
                labels: kv.require("data.labels")?,
                limit: kv.require("data.limit")?,
            },
            "synth" => DataSpec::Synth {
                n: kv.require("synth.n")?,
                d: kv.require("synth.d")?,
                decay: kv.require("synth.decay")?,
            },
            other => return Err(Error::InvalidParameter(format!("unknown data.source {other:?}"))),
        };
        let loss = match kv.raw("train.loss") {
            Some(v) => parse_loss(v)?,
            None if source == "synth" => Loss::Squared,
            None => Loss::SoftmaxCrossEntropy,
        };
        let learning_rate = match kv.get("train.learning_rate")? {
            Some(lr) => lr,
            None if source == "synth" => SYNTH_LEARNING_RATE,
            None => MNIST_LEARNING_RATE,
        };
        let train = TrainConfig {
            epochs: kv.require("train.epochs")?,
            batch_size: kv.require("train.batch_size")?,
            learning_rate,
            weight_decay: kv.require("train.weight_decay")?,
            seed,
            loss,
        };
        train.validate()?;

        let layers: Vec<usize> = kv.list("prune.layers")?;
        let widths: Vec<usize> = kv.list("prune.widths")?;
        let coefs: Vec<f64> = kv.list("prune.lambda_coef")?;
        if !widths.is_empty() && widths.len() != layers.len() {
            return Err(Error::InvalidParameter(format!(
                "prune.widths lists {} values for {} layers",
                widths.len(),
                layers.len()
            )));
        }
        if coefs.len() > 1 && coefs.len() != layers.len() {
            return Err(Error::InvalidParameter(format!(
                "prune.lambda_coef lists {} values for {} layers",
                coefs.len(),
                layers.len()
            )));
        }
        let mut policies = BTreeMap::new();
        for (i, &l) in layers.iter().enumerate() {
            let coef = match coefs.len() {
                0 => None,
                1 => Some(coefs[0]),
                _ => Some(coefs[i]),
            };
            let policy = match (widths.get(i), coef) {
                (Some(&width), Some(coef)) => WidthPolicy::WidthAndLambdaCoef { width, coef },
                (Some(&w), None) => WidthPolicy::Width(w),
                (None, Some(c)) => WidthPolicy::LambdaCoef(c),
                (None, None) => WidthPolicy::LambdaCoef(LAMBDA_COEF_PRUNE),
            };
            if policies.insert(l, policy).is_some() {
                return Err(Error::InvalidParameter(format!("layer {l} listed twice in prune.layers")));
            }
        }
        let procedure = match kv.raw("prune.procedure").unwrap_or("backward") {
            "backward" => Procedure::Backward,
            "simultaneous" => Procedure::Simultaneous,
            other => return Err(Error::InvalidParameter(format!("unknown prune.procedure {other:?}"))),
        };
        let tau = match kv.raw("prune.tau").unwrap_or("leverage") {
            "leverage" => TauPolicy::Leverage,
            v => TauPolicy::Scalar(
                v.parse()
                    .map_err(|_| Error::InvalidParameter(format!("prune.tau = {v:?}; use `leverage` or a number")))?,
            ),
        };
        let prune = PruneConfig {
            theta: kv.require("prune.theta")?,
            layers: policies,
            procedure,
            budget_constraint: parse_bool("prune.budget_constraint", kv.raw("prune.budget_constraint").unwrap_or("true"))?,
            tau,
            default_lambda_coef: kv.require("prune.default_lambda_coef")?,
        };
        let bound = BoundConfig {
            c1: kv.require("bound.c1")?,
            big_c1: kv.require("bound.big_c1")?,
            t: kv.require("bound.t")?,
            truncation: kv.get::<f64>("bound.truncation")?.filter(|m| m.is_finite()),
            rho: kv.get("bound.rho")?,
            loss,
        };
        if !(bound.t > 0.0) {
            return Err(Error::InvalidParameter(format!("bound.t = {} must be positive", bound.t)));
        }
        let sweep = SweepSpec {
            kind: match kv.raw("sweep.kind").unwrap_or("width") {
                "width" => SweepKind::Width,
                "theta" => SweepKind::Theta,
                "lambda" | "lambda_coef" => SweepKind::LambdaCoef,
                other => return Err(Error::InvalidParameter(format!("unknown sweep.kind {other:?}"))),
            },
            layer: kv.get("sweep.layer")?,
            values: kv.list("sweep.values")?,
            width: kv.get("sweep.width")?,
        };
        Ok(ExperimentConfig {
            seed,
            data,
            train_count: kv.get("data.train")?,
            hidden: kv.list("model.hidden")?,
            activation: parse_activation(kv.raw("model.activation").unwrap_or("relu"))?,
            train,
            prune,
            bound,
            sweep,
            spectrum_layers: kv.list("spectrum.layers")?,
        })
    }
}
