//! Matching, macro P/R/F1, source-split reports and cross-modal retrieval.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{GoldSource, Sample, ValueType, Vocabulary, UNKNOWN_VALUE};
use crate::error::{Error, Result};
use crate::model::{image_feature, predict, text_feature, Model};
use crate::tensor::{l2_norm, Matrix};

/// One scored prediction. Value ids are canonical; an empty prediction is an abstention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub predicted: Vec<usize>,
    pub gold: Vec<usize>,
    pub value_type: ValueType,
    pub gold_source: Option<GoldSource>,
    pub category_id: usize,
}

impl EvalRecord {
    /// Canonicalizes surface strings through the vocabulary.
    pub fn from_strings(
        id: impl Into<String>,
        predicted: &[&str],
        gold: &[&str],
        value_type: ValueType,
        gold_source: Option<GoldSource>,
        category_id: usize,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let canon = |xs: &[&str]| -> Vec<usize> {
            let set: BTreeSet<usize> = xs.iter().map(|s| normalize(s, vocab)).collect();
            set.into_iter().collect()
        };
        let record = Self { id: id.into(), predicted: canon(predicted), gold: canon(gold), value_type, gold_source, category_id };
        if record.gold.is_empty() {
            return Err(Error::InvalidInput(format!("record {}: empty gold set", record.id)));
        }
        Ok(record)
    }

    pub fn is_correct(&self) -> bool {
        match_prediction(&self.predicted, &self.gold, self.value_type)
    }
}

/// Lowercased, trimmed, synonym-mapped value id; [`UNKNOWN_VALUE`] for anything else.
pub fn normalize(surface: &str, vocab: &Vocabulary) -> usize {
    vocab.normalize(surface)
}

/// SINGLE: the prediction is exactly the one gold value. MULTIPLE: every gold value was predicted.
pub fn match_prediction(predicted: &[usize], gold: &[usize], value_type: ValueType) -> bool {
    match value_type {
        ValueType::Single => {
            let p: BTreeSet<_> = predicted.iter().collect();
            let g: BTreeSet<_> = gold.iter().collect();
            g.len() == 1 && p == g
        }
        ValueType::Multiple => gold.iter().all(|g| predicted.contains(g)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_precision_recall(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1 }
    }

    fn minus(self, other: Prf) -> Prf {
        Prf { precision: self.precision - other.precision, recall: self.recall - other.recall, f1: self.f1 - other.f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gold_count: usize,
    pub metrics: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_records: usize,
    pub accuracy: f64,
    pub classes: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn macro_prf(records: &[EvalRecord]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("macro_prf needs at least one record".into()));
    }
    // (tp, fp, fn, gold occurrences)
    let mut counts: BTreeMap<usize, (usize, usize, usize, usize)> = BTreeMap::new();
    for r in records {
        if r.gold.is_empty() {
            return Err(Error::InvalidInput(format!("record {}: empty gold set", r.id)));
        }
        let pred: BTreeSet<usize> = r.predicted.iter().copied().filter(|&v| v != UNKNOWN_VALUE).collect();
        let gold: BTreeSet<usize> = r.gold.iter().copied().collect();
        for &v in &gold {
            let entry = counts.entry(v).or_default();
            entry.3 += 1;
            let hit = match r.value_type {
                ValueType::Single => pred.len() == 1 && pred.contains(&v),
                ValueType::Multiple => pred.contains(&v),
            };
            if hit {
                entry.0 += 1;
            } else {
                entry.2 += 1;
            }
        }
        for &v in pred.difference(&gold) {
            counts.entry(v).or_default().1 += 1;
        }
    }
    let classes: Vec<ClassMetrics> = counts
        .into_iter()
        .map(|(class, (tp, fp, fn_, gold_count))| ClassMetrics {
            class,
            tp,
            fp,
            fn_,
            gold_count,
            metrics: Prf::from_precision_recall(ratio(tp, tp + fp), ratio(tp, tp + fn_)),
        })
        .collect();
    let scored: Vec<&ClassMetrics> = classes.iter().filter(|c| c.gold_count > 0).collect();
    let n = scored.len() as f64;
    let macro_avg = Prf {
        precision: scored.iter().map(|c| c.metrics.precision).sum::<f64>() / n,
        recall: scored.iter().map(|c| c.metrics.recall).sum::<f64>() / n,
        f1: scored.iter().map(|c| c.metrics.f1).sum::<f64>() / n,
    };
    let correct = records.iter().filter(|r| r.is_correct()).count();
    Ok(MetricsReport { n_records: records.len(), accuracy: ratio(correct, records.len()), classes, macro_avg })
}

/// Overall report plus per-source splits and their macro difference (TEXT − IMAGE).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceAwareReport {
    pub overall: MetricsReport,
    pub text: Option<MetricsReport>,
    pub image: Option<MetricsReport>,
    pub gap: Option<Prf>,
}

pub fn source_aware_report(records: &[EvalRecord]) -> Result<SourceAwareReport> {
    let overall = macro_prf(records)?;
    let split = |source: GoldSource| -> Result<Option<MetricsReport>> {
        let mut subset = Vec::new();
        for r in records {
            let s = r.gold_source.ok_or_else(|| Error::InvalidInput(format!("record {}: missing gold_source", r.id)))?;
            if s == source {
                subset.push(r.clone());
            }
        }
        if subset.is_empty() {
            Ok(None)
        } else {
            macro_prf(&subset).map(Some)
        }
    };
    let text = split(GoldSource::Text)?;
    let image = split(GoldSource::Image)?;
    let gap = match (&text, &image) {
        (Some(t), Some(i)) => Some(t.macro_avg.minus(i.macro_avg)),
        _ => None,
    };
    Ok(SourceAwareReport { overall, text, image, gap })
}

/// One flat report line: `split, class, P, R, F1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub split: String,
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub const CSV_HEADER: &str = "split,class,P,R,F1";
pub const MACRO_CLASS: &str = "macro";

fn class_name(class: usize, vocab: Option<&Vocabulary>) -> String {
    vocab.and_then(|v| v.values.get(class).cloned()).unwrap_or_else(|| class.to_string())
}

fn push_rows(rows: &mut Vec<ReportRow>, split: &str, report: &MetricsReport, vocab: Option<&Vocabulary>) {
    for c in report.classes.iter().filter(|c| c.gold_count > 0) {
        rows.push(ReportRow {
            split: split.into(),
            class: class_name(c.class, vocab),
            precision: c.metrics.precision,
            recall: c.metrics.recall,
            f1: c.metrics.f1,
        });
    }
    let m = report.macro_avg;
    rows.push(ReportRow { split: split.into(), class: MACRO_CLASS.into(), precision: m.precision, recall: m.recall, f1: m.f1 });
}

impl SourceAwareReport {
    pub fn rows(&self, vocab: Option<&Vocabulary>) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        push_rows(&mut rows, "ALL", &self.overall, vocab);
        if let Some(t) = &self.text {
            push_rows(&mut rows, "TEXT", t, vocab);
        }
        if let Some(i) = &self.image {
            push_rows(&mut rows, "IMAGE", i, vocab);
        }
        if let Some(g) = self.gap {
            rows.push(ReportRow { split: "GAP".into(), class: MACRO_CLASS.into(), precision: g.precision, recall: g.recall, f1: g.f1 });
        }
        rows
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.split, r.class, r.precision, r.recall, r.f1));
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let bad = |line: usize, reason: String| Error::Parse { path: "<report csv>".into(), line, reason };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(bad(1, format!("expected header `{CSV_HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad(i + 1, format!("expected 5 fields, found {}", fields.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 1, format!("`{s}`: {e}")));
        rows.push(ReportRow {
            split: fields[0].into(),
            class: fields[1].into(),
            precision: num(fields[2])?,
            recall: num(fields[3])?,
            f1: num(fields[4])?,
        });
    }
    Ok(rows)
}

/// Runs the model over annotated samples.
pub fn evaluate_samples(model: &Model, samples: &[Sample]) -> Result<Vec<EvalRecord>> {
    samples
        .iter()
        .map(|s| {
            let generation = predict(model, s)?;
            Ok(EvalRecord {
                id: s.id.clone(),
                predicted: generation.values,
                gold: s.reference_label().to_vec(),
                value_type: model.value_type,
                gold_source: s.gold_source,
                category_id: s.category_id,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    /// Image-to-text recall at rank 1.
    pub t_at_1: f64,
    /// Text-to-image recall at rank 1.
    pub i_at_1: f64,
    /// Mean rank of the true text per image.
    pub t_at_m: f64,
    /// Mean rank of the true image per text.
    pub i_at_m: f64,
    pub r_at_mean: f64,
}

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Rank of the true pair: one plus the number of strictly better candidates.
fn true_ranks(similarity: &Matrix) -> Vec<usize> {
    (0..similarity.rows())
        .map(|i| {
            let row = similarity.row(i);
            1 + row.iter().filter(|&&s| s > row[i]).count()
        })
        .collect()
}

pub fn retrieval_eval(image: &Matrix, text: &Matrix) -> Result<RetrievalMetrics> {
    if image.rows() != text.rows() {
        return Err(Error::shape("retrieval pairs", image.rows(), text.rows()));
    }
    if image.cols() != text.cols() {
        return Err(Error::shape("retrieval feature width", image.cols(), text.cols()));
    }
    if image.rows() == 0 {
        return Err(Error::InvalidInput("retrieval needs at least one pair".into()));
    }
    for m in [image, text] {
        for r in 0..m.rows() {
            let norm = l2_norm(m.row(r));
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::InvalidInput(format!("retrieval row {r} has norm {norm}, expected 1")));
            }
        }
    }
    let n = image.rows() as f64;
    let i2t = true_ranks(&image.matmul_t(text));
    let t2i = true_ranks(&text.matmul_t(image));
    let at_1 = |ranks: &[usize]| ranks.iter().filter(|&&r| r == 1).count() as f64 / n;
    let mean = |ranks: &[usize]| ranks.iter().sum::<usize>() as f64 / n;
    let t_at_m = mean(&i2t);
    let i_at_m = mean(&t2i);
    Ok(RetrievalMetrics { t_at_1: at_1(&i2t), i_at_1: at_1(&t2i), t_at_m, i_at_m, r_at_mean: (t_at_m + i_at_m) / 2.0 })
}

/// Retrieval over samples using the online encoder.
pub fn retrieval_for_samples(model: &Model, samples: &[Sample]) -> Result<RetrievalMetrics> {
    let image = samples.iter().map(|s| image_feature(&model.encoder, s)).collect::<Result<Vec<_>>>()?;
    let text = samples.iter().map(|s| text_feature(&model.encoder, s)).collect::<Result<Vec<_>>>()?;
    retrieval_eval(&Matrix::from_rows(&image), &Matrix::from_rows(&text))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;

    fn rec(pred: &[usize], gold: &[usize], vt: ValueType, src: GoldSource) -> EvalRecord {
        EvalRecord { id: "x".into(), predicted: pred.to_vec(), gold: gold.to_vec(), value_type: vt, gold_source: Some(src), category_id: 0 }
    }

    #[test]
    fn normalization() {
        let v = Vocabulary::build(4, 2, 32);
        assert_eq!(normalize("Crimson", &v), 0);
        assert_eq!(normalize(" red ", &v), 0);
        assert_eq!(normalize("xyzzy", &v), UNKNOWN_VALUE);
    }

    #[test]
    fn match_rules() {
        use ValueType::*;
        assert!(match_prediction(&[0, 1, 2], &[0, 1], Multiple));
        assert!(!match_prediction(&[0], &[0, 1], Multiple));
        assert!(match_prediction(&[0], &[0], Single));
        assert!(!match_prediction(&[0, 1], &[0], Single));
        assert!(!match_prediction(&[], &[0], Single));
        let v = Vocabulary::build(4, 2, 32);
        let r = EvalRecord::from_strings("a", &["crimson"], &["red"], Single, None, 0, &v).unwrap();
        assert!(r.is_correct());
    }

    #[test]
    fn hand_fixture_two_thirds() {
        use GoldSource::Text;
        use ValueType::Single;
        // A: TP=1 FP=1 FN=0; B: TP=1 FP=0 FN=1.
        let records = vec![rec(&[0], &[0], Single, Text), rec(&[1], &[1], Single, Text), rec(&[0], &[1], Single, Text)];
        let r = macro_prf(&records).unwrap();
        assert_eq!((r.classes[0].tp, r.classes[0].fp, r.classes[0].fn_), (1, 1, 0));
        assert_eq!((r.classes[1].tp, r.classes[1].fp, r.classes[1].fn_), (1, 0, 1));
        assert!((r.macro_avg.precision - 0.75).abs() < 1e-15);
        assert!((r.macro_avg.recall - 0.75).abs() < 1e-15);
        assert!((r.macro_avg.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn abstentions_cost_recall_only() {
        let all_none = vec![rec(&[], &[0], ValueType::Single, GoldSource::Text); 3];
        let r = macro_prf(&all_none).unwrap();
        assert_eq!(r.macro_avg, Prf { precision: 0.0, recall: 0.0, f1: 0.0 });
        assert_eq!(r.classes[0].fp, 0);
        assert!(macro_prf(&[]).is_err());
    }

    #[test]
    fn gap_rows() {
        use GoldSource::*;
        use ValueType::Single;
        let perfect_text = vec![rec(&[0], &[0], Single, Text), rec(&[1], &[1], Single, Text), rec(&[2], &[0], Single, Image), rec(&[2], &[1], Single, Image)];
        let report = source_aware_report(&perfect_text).unwrap();
        assert_eq!(report.gap.unwrap().f1, 1.0);
        let rows = report.rows(None);
        assert_eq!(rows.last().unwrap().split, "GAP");

        let text_only = vec![rec(&[0], &[0], Single, Text)];
        let report = source_aware_report(&text_only).unwrap();
        assert!(report.image.is_none() && report.gap.is_none());
        assert!(report.rows(None).iter().all(|r| r.split != "GAP"));

        let mut missing = text_only.clone();
        missing[0].gold_source = None;
        assert!(source_aware_report(&missing).is_err());
    }

    #[test]
    fn report_round_trips() {
        use GoldSource::*;
        let records = vec![
            rec(&[0], &[0], ValueType::Single, Text),
            rec(&[1], &[0], ValueType::Single, Image),
            rec(&[], &[2], ValueType::Single, Image),
        ];
        let report = source_aware_report(&records).unwrap();
        assert_eq!(SourceAwareReport::from_json(&report.to_json().unwrap()).unwrap(), report);
        let v = Vocabulary::build(4, 2, 32);
        let rows = report.rows(Some(&v));
        assert_eq!(parse_csv(&rows_to_csv(&rows)).unwrap(), rows);
        assert!(parse_csv("nope\n").is_err());
    }

    #[test]
    fn retrieval_examples() {
        let eye = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let m = retrieval_eval(&eye, &eye).unwrap();
        assert_eq!((m.t_at_1, m.i_at_1, m.r_at_mean), (1.0, 1.0, 1.0));
        let swapped = eye.select_rows(&[1, 0, 2]);
        let m = retrieval_eval(&eye, &swapped).unwrap();
        assert!((m.t_at_1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.t_at_m - 5.0 / 3.0).abs() < 1e-15);
        assert!(retrieval_eval(&eye, &eye.select_rows(&[0, 1])).is_err());
        assert!(retrieval_eval(&Matrix::filled(1, 2, 1.0), &Matrix::filled(1, 2, 1.0)).is_err());
    }

    #[test]
    fn random_features_are_near_chance() {
        let n = 100;
        let mut total = 0.0;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut unit = || {
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|_| {
                        let v: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
                        let norm = l2_norm(&v);
                        v.iter().map(|x| x / norm).collect()
                    })
                    .collect();
                Matrix::from_rows(&rows)
            };
            let (a, b) = (unit(), unit());
            total += retrieval_eval(&a, &b).unwrap().t_at_1;
        }
        assert!((total / 10.0 - 0.01).abs() <= 0.02);
    }
}
