//! JSONL dataset files and the JSON vocabulary file.
//!
//! A dataset file starts with one header object describing the shapes every
//! sample must have; each following line is one sample.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetConfig, GoldSource, Sample, ValueType, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    #[serde(rename = "P")]
    pub patches: usize,
    pub d_img: usize,
    #[serde(rename = "T_max")]
    pub t_max: usize,
    #[serde(rename = "C")]
    pub n_categories: usize,
    #[serde(rename = "V")]
    pub n_values: usize,
    pub value_type: ValueType,
}

impl DatasetHeader {
    pub fn from_config(config: &DatasetConfig) -> Self {
        Self {
            version: FORMAT_VERSION,
            patches: config.patches,
            d_img: config.d_img,
            t_max: config.t_max,
            n_categories: config.n_categories,
            n_values: config.n_values,
            value_type: config.value_type,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    patches: Vec<Vec<f64>>,
    tokens: Vec<usize>,
    category_id: usize,
    weak_label: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_label: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_source: Option<GoldSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_flag: Option<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    foreground: Vec<usize>,
}

impl From<&Sample> for SampleRecord {
    fn from(s: &Sample) -> Self {
        Self {
            id: s.id.clone(),
            patches: s.patches.to_rows(),
            tokens: s.tokens.clone(),
            category_id: s.category_id,
            weak_label: s.weak_label.clone(),
            gold_label: s.gold_label.clone(),
            gold_source: s.gold_source,
            // Annotated samples carry no noise diagnostics.
            noise_flag: if s.gold_label.is_some() && !s.noise_flag { None } else { Some(s.noise_flag) },
            foreground: s.foreground.clone(),
        }
    }
}

pub fn save_dataset(header: &DatasetHeader, samples: &[Sample], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write_line = |out: &mut BufWriter<File>, line: String| {
        out.write_all(line.as_bytes()).and_then(|_| out.write_all(b"\n")).map_err(|e| Error::io(path, e))
    };
    write_line(&mut out, serde_json::to_string(header)?)?;
    for s in samples {
        write_line(&mut out, serde_json::to_string(&SampleRecord::from(s))?)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Sample>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |line: usize, reason: String| Error::Parse { path: path.to_path_buf(), line, reason };

    let header_line = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header line".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader =
        serde_json::from_str(&header_line).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(parse_err(1, format!("unsupported format version {}", header.version)));
    }

    let mut samples = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        if rec.patches.len() != header.patches || rec.patches.iter().any(|r| r.len() != header.d_img) {
            return Err(parse_err(
                line_no,
                format!("patch grid does not match header ({} x {})", header.patches, header.d_img),
            ));
        }
        if rec.tokens.len() > header.t_max {
            return Err(parse_err(line_no, format!("{} tokens exceed T_max={}", rec.tokens.len(), header.t_max)));
        }
        if rec.category_id >= header.n_categories {
            return Err(parse_err(line_no, format!("category {} out of range", rec.category_id)));
        }
        let labels = rec.weak_label.iter().chain(rec.gold_label.iter().flatten());
        if let Some(bad) = labels.into_iter().find(|&&v| v >= header.n_values) {
            return Err(parse_err(line_no, format!("value id {bad} out of range")));
        }
        let sample = Sample {
            id: rec.id,
            patches: Matrix::from_rows(&rec.patches),
            tokens: rec.tokens,
            category_id: rec.category_id,
            weak_label: rec.weak_label,
            gold_label: rec.gold_label,
            gold_source: rec.gold_source,
            noise_flag: rec.noise_flag.unwrap_or(false),
            foreground: rec.foreground,
        };
        sample.validate().map_err(|e| parse_err(line_no, e.to_string()))?;
        samples.push(sample);
    }
    Ok((header, samples))
}

pub fn save_vocabulary(vocab: &Vocabulary, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(vocab)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_vocabulary(path: &Path) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vocab: Vocabulary = serde_json::from_str(&text)?;
    if !vocab.is_consistent() {
        return Err(Error::InvalidInput(format!("{}: synonym map is inconsistent", path.display())));
    }
    Ok(vocab)
}
