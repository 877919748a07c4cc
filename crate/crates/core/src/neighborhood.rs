//! Label reliability from visual and prediction neighborhoods.
//!
//! A sample's weak label is trusted in proportion to how many of its visual
//! nearest neighbors carry the same label, and (from epoch `E` on) how well
//! the set of samples sharing its previous prediction overlaps the set
//! sharing its label. The sample itself is excluded from every set.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest rows to row `n` by Euclidean distance, nearest
/// first, excluding `n`. Ties go to the lower index.
pub fn knn_visual(features: &Matrix, n: usize, k: usize) -> Result<Vec<usize>> {
    let total = features.rows();
    if k >= total {
        return Err(Error::InvalidInput(format!("K={k} must be smaller than the number of samples ({total})")));
    }
    if n >= total {
        return Err(Error::InvalidInput(format!("sample index {n} out of range")));
    }
    let anchor = features.row(n);
    let mut scored: Vec<(f64, usize)> = (0..total)
        .filter(|&j| j != n)
        .map(|j| (squared_distance(anchor, features.row(j)), j))
        .collect();
    let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k > 0 && k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_distance);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_distance);
    Ok(scored.into_iter().map(|(_, j)| j).collect())
}

/// Order-insensitive key for a label set.
pub fn label_key(label: &[usize]) -> Vec<usize> {
    let mut key = label.to_vec();
    key.sort_unstable();
    key.dedup();
    key
}

/// Indices `j ≠ n` whose label set equals sample `n`'s.
pub fn label_consensus(labels: &[Vec<usize>], n: usize) -> Vec<usize> {
    let own = label_key(&labels[n]);
    (0..labels.len()).filter(|&j| j != n && label_key(&labels[j]) == own).collect()
}

/// `|N ∩ Y| / K`
pub fn visual_reliability(neighbors: &[usize], consensus: &[usize], k: usize) -> f64 {
    let agreeing = neighbors.iter().filter(|j| consensus.contains(j)).count();
    agreeing as f64 / k as f64
}

/// Jaccard overlap `|Ŷ ∩ Y| / |Ŷ ∪ Y|`, 1 when both sets are empty.
pub fn prediction_reliability(prediction_neighbors: &[usize], consensus: &[usize]) -> f64 {
    let inter = prediction_neighbors.iter().filter(|j| consensus.contains(j)).count();
    let union = prediction_neighbors.len() + consensus.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Visual reliability alone before epoch `e_start`, the average of both from then on.
pub fn combine(s_v: f64, s_p: Option<f64>, epoch: usize, e_start: usize) -> Result<f64> {
    if epoch < e_start {
        return Ok(s_v);
    }
    let s_p = s_p.ok_or_else(|| {
        Error::InvalidInput(format!("epoch {epoch} >= E={e_start} requires a prediction reliability"))
    })?;
    Ok((s_v + s_p) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reliability {
    pub s_v: f64,
    pub s_p: Option<f64>,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTable {
    pub epoch: usize,
    pub rows: Vec<Reliability>,
}

impl ReliabilityTable {
    pub fn weights(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.s).collect()
    }

    /// Mean combined weight over the rows selected by `keep`.
    pub fn mean_where(&self, keep: impl Fn(usize) -> bool) -> Option<f64> {
        let picked: Vec<f64> = self.rows.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, r)| r.s).collect();
        (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
    }
}

fn group_sizes<'a>(keys: impl Iterator<Item = &'a Vec<usize>>) -> HashMap<&'a Vec<usize>, usize> {
    let mut sizes = HashMap::new();
    for k in keys {
        *sizes.entry(k).or_insert(0) += 1;
    }
    sizes
}

/// Reliability of every sample from one frozen snapshot.
///
/// `predictions` must be present for `epoch >= e_start`; it is ignored before.
pub fn reliability_table(
    features: &Matrix,
    labels: &[Vec<usize>],
    predictions: Option<&[Vec<usize>]>,
    k: usize,
    epoch: usize,
    e_start: usize,
) -> Result<ReliabilityTable> {
    let n = labels.len();
    if features.rows() != n {
        return Err(Error::shape("reliability features", n, features.rows()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("K must be positive".into()));
    }
    let use_predictions = epoch >= e_start;
    let predictions = match (use_predictions, predictions) {
        (false, _) => None,
        (true, Some(p)) if p.len() == n => Some(p),
        (true, Some(p)) => return Err(Error::shape("reliability predictions", n, p.len())),
        (true, None) => {
            return Err(Error::InvalidInput(format!("epoch {epoch} >= E={e_start} requires previous predictions")))
        }
    };

    let label_keys: Vec<Vec<usize>> = labels.iter().map(|l| label_key(l)).collect();
    let label_groups = group_sizes(label_keys.iter());
    let pred_keys: Option<Vec<Vec<usize>>> = predictions.map(|p| p.iter().map(|l| label_key(l)).collect());
    let pred_groups = pred_keys.as_ref().map(|keys| group_sizes(keys.iter()));
    let joint_keys: Option<Vec<Vec<usize>>> = pred_keys.as_ref().map(|pk| {
        pk.iter()
            .zip(&label_keys)
            .map(|(p, l)| {
                // Joint (prediction, label) key; usize::MAX never occurs as a value id.
                p.iter().copied().chain([usize::MAX]).chain(l.iter().copied()).collect()
            })
            .collect()
    });
    let joint_groups = joint_keys.as_ref().map(|keys| group_sizes(keys.iter()));

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let neighbors = knn_visual(features, i, k)?;
        let agreeing = neighbors.iter().filter(|&&j| label_keys[j] == label_keys[i]).count();
        let s_v = agreeing as f64 / k as f64;
        let s_p = match (&pred_keys, &pred_groups, &joint_keys, &joint_groups) {
            (Some(pk), Some(pg), Some(jk), Some(jg)) => {
                let same_label = label_groups[&label_keys[i]] - 1;
                let same_pred = pg[&pk[i]] - 1;
                let both = jg[&jk[i]] - 1;
                let union = same_label + same_pred - both;
                Some(if union == 0 { 1.0 } else { both as f64 / union as f64 })
            }
            _ => None,
        };
        let s = combine(s_v, s_p, epoch, e_start)?;
        rows.push(Reliability { s_v, s_p, s });
    }
    Ok(ReliabilityTable { epoch, rows })
}
