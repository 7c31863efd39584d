//! Experiment configuration, read from flat `key=value` text or JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::bayes::{KlSchedule, ScaleMixturePrior};
use crate::data::{MnistFiles, SplitSpec, ValSource};
use crate::error::{Error, Result};
use crate::model::{Architecture, BayesSettings, Method};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    /// Gaussian blobs, see [`crate::data::synth_blobs`].
    Blobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default = "defaults::architecture")]
    pub architecture: Architecture,
    #[serde(default = "defaults::dataset")]
    pub dataset: DatasetKind,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::bbb_train_samples")]
    pub bbb_train_samples: usize,
    #[serde(default = "defaults::val_passes")]
    pub val_passes: usize,
    #[serde(default = "defaults::test_passes")]
    pub test_passes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "defaults::train_images")]
    pub train_images: String,
    #[serde(default = "defaults::train_labels")]
    pub train_labels: String,
    #[serde(default = "defaults::test_images")]
    pub test_images: String,
    #[serde(default = "defaults::test_labels")]
    pub test_labels: String,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "defaults::train_size")]
    pub train_size: usize,
    #[serde(default = "defaults::val_size")]
    pub val_size: usize,
    #[serde(default = "defaults::test_size")]
    pub test_size: usize,
    #[serde(default = "defaults::val_source")]
    pub val_source: ValSource,
    #[serde(default)]
    pub kl_schedule: KlSchedule,
    #[serde(default = "defaults::prior_pi")]
    pub prior_pi: f64,
    #[serde(default = "defaults::prior_sigma1")]
    pub prior_sigma1: f64,
    #[serde(default = "defaults::prior_sigma2")]
    pub prior_sigma2: f64,
    #[serde(default = "defaults::rho_init")]
    pub rho_init: f64,
    /// Layers that carry masks; the method's default placement when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_sites: Option<Vec<String>>,
    /// Hidden width of the `mlp` architecture.
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    #[serde(default = "defaults::blob_classes")]
    pub blob_classes: usize,
    #[serde(default = "defaults::blob_per_class")]
    pub blob_per_class: usize,
    #[serde(default)]
    pub blob_noise: f64,
}

mod defaults {
    use super::*;

    pub fn architecture() -> Architecture {
        Architecture::MnistCnn
    }
    pub fn dataset() -> DatasetKind {
        DatasetKind::Mnist
    }
    pub fn epochs() -> usize {
        10
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn learning_rate() -> f64 {
        1.0
    }
    pub fn bbb_train_samples() -> usize {
        5
    }
    pub fn val_passes() -> usize {
        25
    }
    pub fn test_passes() -> usize {
        100
    }
    pub fn data_dir() -> PathBuf {
        "data/mnist".into()
    }
    pub fn train_images() -> String {
        MnistFiles::default().train_images
    }
    pub fn train_labels() -> String {
        MnistFiles::default().train_labels
    }
    pub fn test_images() -> String {
        MnistFiles::default().test_images
    }
    pub fn test_labels() -> String {
        MnistFiles::default().test_labels
    }
    pub fn output_dir() -> PathBuf {
        "runs".into()
    }
    pub fn train_size() -> usize {
        SplitSpec::DESK.train
    }
    pub fn val_size() -> usize {
        SplitSpec::DESK.val
    }
    pub fn test_size() -> usize {
        SplitSpec::DESK.test
    }
    pub fn val_source() -> ValSource {
        ValSource::TestFile
    }
    pub fn prior_pi() -> f64 {
        ScaleMixturePrior::default().pi
    }
    pub fn prior_sigma1() -> f64 {
        ScaleMixturePrior::default().sigma1
    }
    pub fn prior_sigma2() -> f64 {
        ScaleMixturePrior::default().sigma2
    }
    pub fn rho_init() -> f64 {
        BayesSettings::default().rho_init
    }
    pub fn hidden() -> usize {
        32
    }
    pub fn blob_classes() -> usize {
        3
    }
    pub fn blob_per_class() -> usize {
        100
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults for `method`, with `p` where the method takes one.
    pub fn desk(method: Method, p: Option<f64>) -> Self {
        let mut obj = Map::new();
        obj.insert(
            "method".into(),
            serde_json::to_value(method).expect("method serializes"),
        );
        if let Some(p) = p {
            obj.insert("p".into(), p.into());
        }
        serde_json::from_value(Value::Object(obj)).expect("defaults deserialize")
    }

    /// Switches counts to the published protocol: 500 epochs, learning rate 0.001 and
    /// the 50,000 / 10,000 / 10,000 split.
    pub fn apply_full_scale(&mut self) {
        self.epochs = 500;
        self.learning_rate = 0.001;
        self.batch_size = 64;
        self.bbb_train_samples = 5;
        self.val_passes = 25;
        self.test_passes = 100;
        self.train_size = SplitSpec::FULL.train;
        self.val_size = SplitSpec::FULL.val;
        self.test_size = SplitSpec::FULL.test;
        self.val_source = SplitSpec::FULL.val_source;
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.train_size,
            val: self.val_size,
            test: self.test_size,
            val_source: self.val_source,
        }
    }

    pub fn mnist_files(&self) -> MnistFiles {
        MnistFiles {
            train_images: self.train_images.clone(),
            train_labels: self.train_labels.clone(),
            test_images: self.test_images.clone(),
            test_labels: self.test_labels.clone(),
        }
    }

    pub fn bayes_settings(&self) -> BayesSettings {
        BayesSettings {
            prior: ScaleMixturePrior {
                pi: self.prior_pi,
                sigma1: self.prior_sigma1,
                sigma2: self.prior_sigma2,
            },
            rho_init: self.rho_init,
        }
    }

    /// Leave-out rate seen by the model; zero for methods without one.
    pub fn rate(&self) -> f64 {
        self.p.unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("bbb_train_samples", self.bbb_train_samples),
            ("val_passes", self.val_passes),
            ("test_passes", self.test_passes),
            ("train_size", self.train_size),
            ("val_size", self.val_size),
            ("test_size", self.test_size),
            ("hidden", self.hidden),
            ("blob_per_class", self.blob_per_class),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        match (self.method.mask_method(), self.p) {
            (Some(_), None) => {
                return Err(Error::Config(format!("method {} requires p", self.method)));
            }
            (Some(_), Some(p)) if !(0.0..1.0).contains(&p) => {
                return Err(Error::Config(format!("p = {p} outside [0, 1)")));
            }
            (None, Some(_)) => {
                return Err(Error::Config(format!("method {} takes no p", self.method)));
            }
            _ => {}
        }
        if self.method == Method::Bbb {
            self.bayes_settings().prior.validate()?;
            if !self.rho_init.is_finite() {
                return Err(Error::Config("rho_init must be finite".into()));
            }
        }
        if self.dataset == DatasetKind::Blobs && self.blob_classes < 2 {
            return Err(Error::Config("blob_classes must be at least 2".into()));
        }
        if !(self.blob_noise >= 0.0) {
            return Err(Error::Config("blob_noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Parses JSON (when the text starts with `{`) or `key=value` lines. `#` starts a
    /// comment line. Values are read as JSON where possible and as strings otherwise.
    pub fn parse(text: &str) -> Result<Self> {
        let value = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON config: {e}")))?
        } else {
            let mut obj = Map::new();
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, val) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
                let (key, val) = (key.trim(), val.trim());
                let parsed = serde_json::from_str(val).unwrap_or_else(|_| Value::String(val.to_string()));
                if obj.insert(key.to_string(), parsed).is_some() {
                    return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
                }
            }
            Value::Object(obj)
        };
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Canonical `key=value` form; [`ExperimentConfig::parse`] inverts it exactly.
    pub fn to_key_values(&self) -> String {
        let Value::Object(obj) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!("config serializes to an object")
        };
        let mut out = String::new();
        for (k, v) in obj {
            let text = match &v {
                // Bare strings unless reading them back as JSON would change them.
                Value::String(s) if serde_json::from_str::<Value>(s).is_err() && s.trim() == s && !s.is_empty() => {
                    s.clone()
                }
                _ => v.to_string(),
            };
            out.push_str(&format!("{k}={text}\n"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
