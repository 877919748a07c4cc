//! Category-supervised patch gating.
//!
//! A scoring head assigns one logit per patch. Softmax over those logits
//! pools the patches for category classification; sigmoid of the same
//! logits gates each patch before fusion, so the category loss is what
//! teaches the gate which patches matter.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var, LOG_EPS};
use crate::encoders::EncoderParams;
use crate::error::{Error, Result};
use crate::tensor::{dot, sigmoid, softmax, Matrix};

/// Per-patch mask logits and their sigmoid gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMask {
    pub logits: Vec<f64>,
    pub gates: Vec<f64>,
}

impl AttentionMask {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let gates = logits.iter().map(|&l| sigmoid(l)).collect();
        Self { logits, gates }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryOutput {
    pub logits: Vec<f64>,
    pub mask: AttentionMask,
    /// Softmax pooling weights over patches.
    pub pooling: Vec<f64>,
}

/// Category logits from the `P × d_h` patch embeddings (no CLS row).
pub fn category_logits(params: &EncoderParams, patch_embeddings: &Matrix) -> Result<CategoryOutput> {
    let c = params.category_w.cols();
    if c < 2 {
        return Err(Error::config("n_categories", format!("category classifier needs at least 2 classes, got {c}")));
    }
    if patch_embeddings.cols() != params.d_h() {
        return Err(Error::shape("category_logits", params.d_h(), patch_embeddings.cols()));
    }
    let w = params.mask_w.data();
    let b = params.mask_b.get(0, 0);
    let scores: Vec<f64> = (0..patch_embeddings.rows()).map(|p| dot(patch_embeddings.row(p), w) + b).collect();
    let pooling = softmax(&scores);
    let mut pooled = vec![0.0; params.d_h()];
    for (p, weight) in pooling.iter().enumerate() {
        for (acc, v) in pooled.iter_mut().zip(patch_embeddings.row(p)) {
            *acc += weight * v;
        }
    }
    let logits = (0..c)
        .map(|k| {
            let col: f64 = pooled.iter().enumerate().map(|(j, v)| v * params.category_w.get(j, k)).sum();
            col + params.category_b.get(0, k)
        })
        .collect();
    Ok(CategoryOutput { logits, mask: AttentionMask::from_logits(scores), pooling })
}

/// Mean cross-entropy of category logits against category ids.
pub fn ct_loss(logits: &[Vec<f64>], categories: &[usize]) -> Result<f64> {
    if logits.is_empty() || logits.len() != categories.len() {
        return Err(Error::shape("ct_loss batch", logits.len(), categories.len()));
    }
    let mut total = 0.0;
    for (row, &c) in logits.iter().zip(categories) {
        if c >= row.len() {
            return Err(Error::InvalidInput(format!("category {c} out of range for {} classes", row.len())));
        }
        total -= softmax(row)[c].max(LOG_EPS).ln();
    }
    Ok(total / logits.len() as f64)
}

/// Scales patch rows `1..=P` of a `(P + 1) × d_h` sequence by their gates; row 0 (CLS) passes through.
pub fn prune(sequence: &Matrix, mask: &AttentionMask) -> Result<Matrix> {
    if sequence.rows() != mask.gates.len() + 1 {
        return Err(Error::shape("prune", format!("{} rows", mask.gates.len() + 1), sequence.rows()));
    }
    let mut out = sequence.clone();
    for (p, &g) in mask.gates.iter().enumerate() {
        for v in out.row_mut(p + 1) {
            *v *= g;
        }
    }
    Ok(out)
}

/// Tape handles for the category branch.
#[derive(Debug, Clone, Copy)]
pub struct CategoryVars {
    /// `P × 1`
    pub scores: Var,
    /// `1 × C`
    pub logits: Var,
}

pub fn category_forward(tape: &mut Tape, params: &EncoderParams, patches: Var) -> Result<CategoryVars> {
    if params.category_w.cols() < 2 {
        return Err(Error::config("n_categories", "category classifier needs at least 2 classes"));
    }
    let w = tape.param("encoder.mask_w", &params.mask_w);
    let b = tape.param("encoder.mask_b", &params.mask_b);
    let cw = tape.param("encoder.category_w", &params.category_w);
    let cb = tape.param("encoder.category_b", &params.category_b);
    let raw = tape.matmul(patches, w);
    let scores = tape.add_row(raw, b);
    let row = tape.transpose(scores);
    let pooling = tape.softmax_rows(row);
    let pooled = tape.matmul(pooling, patches);
    let projected = tape.matmul(pooled, cw);
    let logits = tape.add_row(projected, cb);
    Ok(CategoryVars { scores, logits })
}

/// Gated patch rows, `P × d_h`.
pub fn prune_forward(tape: &mut Tape, patches: Var, scores: Var) -> Var {
    let gates = tape.sigmoid(scores);
    tape.row_scale(patches, gates)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::ModelDims;

    fn params(c: usize) -> EncoderParams {
        let dims = ModelDims { n_categories: c, ..ModelDims::tiny() };
        EncoderParams::init(&dims, &mut ChaCha8Rng::seed_from_u64(4))
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let mut p = params(14);
        p.category_w = Matrix::zeros(p.d_h(), 14);
        let emb = Matrix::from_rows(&vec![vec![0.3; p.d_h()]; 4]);
        let out = category_logits(&p, &emb).unwrap();
        let loss = ct_loss(&[out.logits], &[3]).unwrap();
        assert!((loss - 14f64.ln()).abs() < 1e-12);
        assert!((loss - 2.639).abs() < 1e-3);
    }

    #[test]
    fn identical_patches_pool_uniformly() {
        let p = params(3);
        let emb = Matrix::from_rows(&vec![vec![0.1, -0.2, 0.3, 0.0, 0.5, 0.2]; 5]);
        let out = category_logits(&p, &emb).unwrap();
        for w in out.pooling {
            assert!((w - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn single_class_classifier_is_rejected() {
        let p = params(1);
        assert!(category_logits(&p, &Matrix::zeros(4, p.d_h())).is_err());
    }

    #[test]
    fn ct_loss_limits_and_means() {
        assert!(ct_loss(&[vec![100.0, 0.0, 0.0]], &[0]).unwrap() < 1e-40);
        let a = ct_loss(&[vec![1.0, 2.0]], &[0]).unwrap();
        let b = ct_loss(&[vec![0.5, -1.0]], &[0]).unwrap();
        let both = ct_loss(&[vec![1.0, 2.0], vec![0.5, -1.0]], &[0, 0]).unwrap();
        assert!((both - (a + b) / 2.0).abs() < 1e-15);
        assert!(ct_loss(&[vec![1.0, 2.0]], &[2]).is_err());
    }

    #[test]
    fn prune_gate_values() {
        let seq = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, -1.0], vec![-5.0, 1.0]]);
        let half = prune(&seq, &AttentionMask::from_logits(vec![0.0; 3])).unwrap();
        assert_eq!(half.row(0), seq.row(0));
        assert_eq!(half.row(1), &[1.0, 2.0]);

        let sat = prune(&seq, &AttentionMask::from_logits(vec![20.0, -20.0, 0.0])).unwrap();
        for (a, b) in sat.row(1).iter().zip(seq.row(1)) {
            assert!(a / b > 1.0 - 1e-8);
        }
        assert!(sat.row(2).iter().all(|v| v.abs() < 1e-8));
        assert!(prune(&seq, &AttentionMask::from_logits(vec![0.0; 2])).is_err());
    }

    #[test]
    fn tape_branch_matches_plain_branch() {
        let p = params(3);
        let emb = Matrix::from_rows(&[
            vec![0.1, -0.2, 0.3, 0.0, 0.5, 0.2],
            vec![0.4, 0.2, -0.3, 0.1, 0.0, 0.9],
            vec![-0.5, 0.1, 0.3, 0.7, 0.2, 0.1],
        ]);
        let plain = category_logits(&p, &emb).unwrap();
        let mut tape = Tape::frozen();
        let e = tape.constant(emb.clone());
        let vars = category_forward(&mut tape, &p, e).unwrap();
        for (a, b) in tape.value(vars.logits).row(0).iter().zip(&plain.logits) {
            assert!((a - b).abs() < 1e-12);
        }
        let gated = prune_forward(&mut tape, e, vars.scores);
        let mut with_cls = Matrix::zeros(1, 6);
        with_cls = Matrix::vstack(&[&with_cls, &emb]);
        let expect = prune(&with_cls, &plain.mask).unwrap();
        for r in 0..3 {
            for (a, b) in tape.value(gated).row(r).iter().zip(expect.row(r + 1)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
