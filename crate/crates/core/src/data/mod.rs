//! Synthetic loosely-aligned image/text samples with weak labels.

mod generate;
mod io;
mod vocab;

pub use generate::{generate_dataset, value_signatures};
pub use io::{load_dataset, load_vocabulary, save_dataset, save_vocabulary, DatasetHeader, FORMAT_VERSION};
pub use vocab::{Vocabulary, UNKNOWN_VALUE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ValueType {
    Single,
    Multiple,
}

impl ValueType {
    /// Longest value set a sample of this type can carry.
    pub fn max_values(self) -> usize {
        match self {
            ValueType::Single => 1,
            ValueType::Multiple => 3,
        }
    }
}

/// Where the gold value of a test sample can be read off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum GoldSource {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `P × d_img` patch features.
    pub patches: Matrix,
    pub tokens: Vec<usize>,
    pub category_id: usize,
    /// Sorted, deduplicated value ids.
    pub weak_label: Vec<usize>,
    pub gold_label: Option<Vec<usize>>,
    pub gold_source: Option<GoldSource>,
    /// Generator bookkeeping: the weak label differs from the hidden true value.
    pub noise_flag: bool,
    /// Generator bookkeeping: indices of patches that carry the true value.
    pub foreground: Vec<usize>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::InvalidInput(format!("sample {}: empty token sequence", self.id)));
        }
        if self.weak_label.is_empty() {
            return Err(Error::InvalidInput(format!("sample {}: empty weak label", self.id)));
        }
        if self.gold_label.is_some() != self.gold_source.is_some() {
            return Err(Error::InvalidInput(format!(
                "sample {}: gold_source must be present exactly when gold_label is",
                self.id
            )));
        }
        Ok(())
    }

    /// The label used for evaluation: gold when annotated, weak otherwise.
    pub fn reference_label(&self) -> &[usize] {
        self.gold_label.as_deref().unwrap_or(&self.weak_label)
    }
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_text_distractor_rate() -> f64 {
    0.5
}

fn default_patch_jitter() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_samples: usize,
    pub n_categories: usize,
    pub n_values: usize,
    pub value_type: ValueType,
    pub vocab_size: usize,
    /// Patches per image.
    pub patches: usize,
    pub d_img: usize,
    pub t_max: usize,
    pub frac_image_source: f64,
    pub label_noise_rate: f64,
    pub background_distractor_rate: f64,
    pub seed: u64,
    /// Share of `n_samples` held out as the annotated test split.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Probability that a clean sample's text also mentions a wrong value.
    #[serde(default = "default_text_distractor_rate")]
    pub text_distractor_rate: f64,
    /// Standard deviation of the per-entry noise added to signature patches.
    #[serde(default = "default_patch_jitter")]
    pub patch_jitter: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            n_categories: 8,
            n_values: 8,
            value_type: ValueType::Single,
            vocab_size: 64,
            patches: 16,
            d_img: 16,
            t_max: 12,
            frac_image_source: 0.3,
            label_noise_rate: 0.2,
            background_distractor_rate: 0.3,
            seed: 0,
            test_fraction: default_test_fraction(),
            text_distractor_rate: default_text_distractor_rate(),
            patch_jitter: default_patch_jitter(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("frac_image_source", self.frac_image_source),
            ("label_noise_rate", self.label_noise_rate),
            ("background_distractor_rate", self.background_distractor_rate),
            ("test_fraction", self.test_fraction),
            ("text_distractor_rate", self.text_distractor_rate),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::config(field, format!("must lie in [0, 1], got {value}")));
            }
        }
        if self.value_type == ValueType::Multiple && self.frac_image_source == 1.0 && self.n_values < 2 {
            return Err(Error::config("n_values", "image-only multi-value data needs at least 2 values"));
        }
        if self.n_values < 2 {
            return Err(Error::config("n_values", format!("need at least 2 values, got {}", self.n_values)));
        }
        if self.n_categories < 2 {
            return Err(Error::config("n_categories", format!("need at least 2 categories, got {}", self.n_categories)));
        }
        if self.patches < 4 {
            return Err(Error::config("patches", format!("need at least 4 patches, got {}", self.patches)));
        }
        if self.d_img == 0 {
            return Err(Error::config("d_img", "must be positive"));
        }
        let mentions = 2 + self.value_type.max_values();
        if self.t_max < mentions {
            return Err(Error::config("t_max", format!("must be at least {mentions} to fit value mentions")));
        }
        let reserved = Vocabulary::reserved_tokens(self.n_values, self.n_categories);
        if self.vocab_size <= reserved {
            return Err(Error::config(
                "vocab_size",
                format!("must exceed {reserved} (value, synonym and category tokens)"),
            ));
        }
        if !(self.patch_jitter >= 0.0 && self.patch_jitter.is_finite()) {
            return Err(Error::config("patch_jitter", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn n_test(&self) -> usize {
        (self.n_samples as f64 * self.test_fraction).round() as usize
    }

    pub fn n_train(&self) -> usize {
        self.n_samples - self.n_test()
    }
}

/// Train and test splits plus the vocabulary used to render them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub vocab: Vocabulary,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}
