//! Flat `key = value` run configuration with `PV2_` environment overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};
use vtx_core::data::{DatasetConfig, ValueType};
use vtx_core::training::TrainConfig;

pub const ENV_PREFIX: &str = "PV2_";

/// Every key a config file may set, in output order.
pub const KEYS: &[&str] = &[
    "seed",
    "data",
    "n_samples",
    "n_categories",
    "n_values",
    "value_type",
    "vocab_size",
    "patches",
    "d_img",
    "t_max",
    "frac_image_source",
    "label_noise_rate",
    "background_distractor_rate",
    "test_fraction",
    "text_distractor_rate",
    "patch_jitter",
    "epochs",
    "batch_size",
    "learning_rate",
    "weight_decay",
    "alpha",
    "tau",
    "queue_size",
    "k",
    "reliability_epoch",
    "momentum",
    "d_h",
    "s1",
    "s2",
    "s3",
    "scale_sc",
    "scale_ct",
    "scale_rmlm",
    "beta1",
    "beta2",
    "adam_eps",
];

/// Keys that do not change what a run computes.
const UNHASHED: &[&str] = &["seed", "data"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    /// Directory holding `train.jsonl`, `test.jsonl` and `vocab.json`.
    pub data: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dataset = DatasetConfig::default();
        let train = TrainConfig { seed: dataset.seed, ..TrainConfig::default() };
        Self { dataset, train, data: None }
    }
}

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: Display,
{
    raw.parse().map_err(|e| anyhow!("{key}: cannot parse `{raw}`: {e}"))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!("{key}: expected a boolean, got `{raw}`"),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let raw = raw.trim();
        let d = &mut self.dataset;
        let t = &mut self.train;
        match key {
            "seed" => {
                let seed = parse(key, raw)?;
                d.seed = seed;
                t.seed = seed;
            }
            "data" => self.data = (!raw.is_empty()).then(|| PathBuf::from(raw)),
            "n_samples" => d.n_samples = parse(key, raw)?,
            "n_categories" => d.n_categories = parse(key, raw)?,
            "n_values" => d.n_values = parse(key, raw)?,
            "value_type" => {
                d.value_type = match raw.to_ascii_uppercase().as_str() {
                    "SINGLE" => ValueType::Single,
                    "MULTIPLE" => ValueType::Multiple,
                    _ => bail!("value_type: expected SINGLE or MULTIPLE, got `{raw}`"),
                }
            }
            "vocab_size" => d.vocab_size = parse(key, raw)?,
            "patches" => d.patches = parse(key, raw)?,
            "d_img" => d.d_img = parse(key, raw)?,
            "t_max" => d.t_max = parse(key, raw)?,
            "frac_image_source" => d.frac_image_source = parse(key, raw)?,
            "label_noise_rate" => d.label_noise_rate = parse(key, raw)?,
            "background_distractor_rate" => d.background_distractor_rate = parse(key, raw)?,
            "test_fraction" => d.test_fraction = parse(key, raw)?,
            "text_distractor_rate" => d.text_distractor_rate = parse(key, raw)?,
            "patch_jitter" => d.patch_jitter = parse(key, raw)?,
            "epochs" => t.epochs = parse(key, raw)?,
            "batch_size" => t.batch_size = parse(key, raw)?,
            "learning_rate" => t.learning_rate = parse(key, raw)?,
            "weight_decay" => t.weight_decay = parse(key, raw)?,
            "alpha" => t.alpha = parse(key, raw)?,
            "tau" => t.tau = parse(key, raw)?,
            "queue_size" => t.queue_size = parse(key, raw)?,
            "k" => t.k = parse(key, raw)?,
            "reliability_epoch" => t.reliability_epoch = parse(key, raw)?,
            "momentum" => t.momentum = parse(key, raw)?,
            "d_h" => t.d_h = parse(key, raw)?,
            "s1" => t.toggles.s1 = parse_bool(key, raw)?,
            "s2" => t.toggles.s2 = parse_bool(key, raw)?,
            "s3" => t.toggles.s3 = parse_bool(key, raw)?,
            "scale_sc" => t.scale_sc = parse(key, raw)?,
            "scale_ct" => t.scale_ct = parse(key, raw)?,
            "scale_rmlm" => t.scale_rmlm = parse(key, raw)?,
            "beta1" => t.beta1 = parse(key, raw)?,
            "beta2" => t.beta2 = parse(key, raw)?,
            "adam_eps" => t.adam_eps = parse(key, raw)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let d = &self.dataset;
        let t = &self.train;
        match key {
            "seed" => t.seed.to_string(),
            "data" => self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "n_samples" => d.n_samples.to_string(),
            "n_categories" => d.n_categories.to_string(),
            "n_values" => d.n_values.to_string(),
            "value_type" => match d.value_type {
                ValueType::Single => "SINGLE".into(),
                ValueType::Multiple => "MULTIPLE".into(),
            },
            "vocab_size" => d.vocab_size.to_string(),
            "patches" => d.patches.to_string(),
            "d_img" => d.d_img.to_string(),
            "t_max" => d.t_max.to_string(),
            "frac_image_source" => d.frac_image_source.to_string(),
            "label_noise_rate" => d.label_noise_rate.to_string(),
            "background_distractor_rate" => d.background_distractor_rate.to_string(),
            "test_fraction" => d.test_fraction.to_string(),
            "text_distractor_rate" => d.text_distractor_rate.to_string(),
            "patch_jitter" => d.patch_jitter.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "alpha" => t.alpha.to_string(),
            "tau" => t.tau.to_string(),
            "queue_size" => t.queue_size.to_string(),
            "k" => t.k.to_string(),
            "reliability_epoch" => t.reliability_epoch.to_string(),
            "momentum" => t.momentum.to_string(),
            "d_h" => t.d_h.to_string(),
            "s1" => t.toggles.s1.to_string(),
            "s2" => t.toggles.s2.to_string(),
            "s3" => t.toggles.s3.to_string(),
            "scale_sc" => t.scale_sc.to_string(),
            "scale_ct" => t.scale_ct.to_string(),
            "scale_rmlm" => t.scale_rmlm.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            _ => unreachable!("unlisted key {key}"),
        }
    }

    /// Applies `key = value` lines. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}: line {}: expected `key = value`", i + 1))?;
            self.set(key.trim(), value).with_context(|| format!("{origin}: line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `PV2_<KEY>` variables from `vars`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let vars: BTreeMap<String, String> = vars.into_iter().collect();
        for key in KEYS {
            let name = format!("{ENV_PREFIX}{}", key.to_ascii_uppercase());
            if let Some(value) = vars.get(&name) {
                self.set(key, value).with_context(|| format!("environment variable {name}"))?;
            }
        }
        Ok(())
    }

    /// Resolution order: defaults, file, environment.
    pub fn resolve(file: Option<&Path>) -> Result<Self> {
        let mut config = Self::default();
        if let Some(path) = file {
            config.apply_file(path)?;
        }
        config.apply_env(std::env::vars())?;
        Ok(config)
    }

    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    /// Hex digest over everything that shapes a run except the seed and paths.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for key in KEYS.iter().filter(|k| !UNHASHED.contains(k)) {
            hasher.update(format!("{key}={}\n", self.get(key)));
        }
        hex(&hasher.finalize())[..12].to_string()
    }

    pub fn run_name(&self) -> String {
        format!("run-{}-seed{}", self.hash(), self.train.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
