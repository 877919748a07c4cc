use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Sentinel id for strings that do not normalize to any known value.
pub const UNKNOWN_VALUE: usize = usize::MAX;

const VALUE_NAMES: [(&str, &str); 16] = [
    ("red", "crimson"),
    ("blue", "azure"),
    ("green", "emerald"),
    ("black", "ebony"),
    ("white", "ivory"),
    ("yellow", "lemon"),
    ("purple", "violet"),
    ("orange", "tangerine"),
    ("pink", "rose"),
    ("brown", "chocolate"),
    ("gray", "slate"),
    ("silver", "platinum"),
    ("gold", "golden"),
    ("beige", "sand"),
    ("navy", "midnight"),
    ("teal", "aqua"),
];

const CATEGORY_NAMES: [&str; 16] = [
    "mattress", "balloon", "sofa", "lamp", "mug", "rug", "jacket", "pillow", "curtain", "vase", "backpack",
    "towel", "blanket", "chair", "kettle", "umbrella",
];

/// Token, value and category surface forms for one synthetic corpus.
///
/// Token layout: `[0, V)` canonical value words, `[V, 2V)` one synonym per
/// value, `[2V, 2V + C)` category words, and filler words after that.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
    pub values: Vec<String>,
    /// Surface string to canonical value string.
    pub synonyms: BTreeMap<String, String>,
    pub categories: Vec<String>,
    pub attributes: Vec<String>,
}

impl Vocabulary {
    pub fn reserved_tokens(n_values: usize, n_categories: usize) -> usize {
        2 * n_values + n_categories
    }

    pub fn build(n_values: usize, n_categories: usize, vocab_size: usize) -> Self {
        let (values, synonyms_list): (Vec<String>, Vec<String>) = (0..n_values)
            .map(|v| match VALUE_NAMES.get(v) {
                Some((canonical, alt)) => (canonical.to_string(), alt.to_string()),
                None => (format!("value{v}"), format!("value{v}-alt")),
            })
            .unzip();
        let categories: Vec<String> = (0..n_categories)
            .map(|c| CATEGORY_NAMES.get(c).map_or_else(|| format!("category{c}"), |s| s.to_string()))
            .collect();

        let mut tokens = Vec::with_capacity(vocab_size);
        tokens.extend(values.iter().cloned());
        tokens.extend(synonyms_list.iter().cloned());
        tokens.extend(categories.iter().cloned());
        let filler = vocab_size.saturating_sub(tokens.len());
        tokens.extend((0..filler).map(|k| format!("w{k}")));

        let mut synonyms = BTreeMap::new();
        for (canonical, alt) in values.iter().zip(&synonyms_list) {
            synonyms.insert(canonical.clone(), canonical.clone());
            synonyms.insert(alt.clone(), canonical.clone());
        }

        Self { tokens, values, synonyms, categories, attributes: vec!["color".to_string()] }
    }

    pub fn n_values(&self) -> usize {
        self.values.len()
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn canonical_token(&self, value: usize) -> usize {
        value
    }

    pub fn synonym_token(&self, value: usize) -> usize {
        self.n_values() + value
    }

    pub fn category_token(&self, category: usize) -> usize {
        2 * self.n_values() + category
    }

    pub fn filler_range(&self) -> std::ops::Range<usize> {
        Self::reserved_tokens(self.n_values(), self.n_categories())..self.tokens.len()
    }

    /// Lowercases, trims and maps through the synonym table.
    pub fn normalize(&self, surface: &str) -> usize {
        let key = surface.trim().to_lowercase();
        self.synonyms
            .get(&key)
            .and_then(|canonical| self.values.iter().position(|v| v == canonical))
            .unwrap_or(UNKNOWN_VALUE)
    }

    /// The value a token mentions, if any.
    pub fn token_value(&self, token: usize) -> Option<usize> {
        let surface = self.tokens.get(token)?;
        match self.normalize(surface) {
            UNKNOWN_VALUE => None,
            v => Some(v),
        }
    }

    /// Checks that the synonym map is functional and every canonical value maps to itself.
    pub fn is_consistent(&self) -> bool {
        self.values.iter().all(|v| self.synonyms.get(v) == Some(v))
            && self.synonyms.values().all(|canonical| self.values.contains(canonical))
    }
}
