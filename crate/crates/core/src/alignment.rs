//! Label-smoothed image-text contrast over in-batch and queued candidates.
//!
//! For image `n` the candidate texts are the current batch's momentum text
//! features followed by the text queue, so the true pair always sits at
//! index `n`. The one-hot pairing target is mixed with the momentum
//! encoders' own similarity distribution, and the online encoders are
//! trained to match that smoothed target. Text-to-image is symmetric.

use crate::autograd::{Tape, Var, LOG_EPS};
use crate::error::{Error, Result};
use crate::tensor::{dot, softmax, Matrix};

/// Row-sum tolerance for every distribution produced here.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

fn scaled_logits(cls: &[f64], candidates: &Matrix, tau: f64) -> Result<Vec<f64>> {
    if candidates.rows() == 0 {
        return Err(Error::InvalidInput("empty candidate set".into()));
    }
    if candidates.cols() != cls.len() {
        return Err(Error::shape("candidate width", cls.len(), candidates.cols()));
    }
    if !(tau > 0.0) {
        return Err(Error::config("tau", format!("temperature must be positive, got {tau}")));
    }
    Ok((0..candidates.rows()).map(|k| dot(cls, candidates.row(k)) / tau).collect())
}

/// Softmax of momentum-feature similarities over the candidate set.
pub fn pseudo_similarity(momentum_cls: &[f64], candidates: &Matrix, tau: f64) -> Result<Vec<f64>> {
    Ok(softmax(&scaled_logits(momentum_cls, candidates, tau)?))
}

/// Predicted matching distribution of an online feature over the candidate set.
pub fn matching_distribution(online_cls: &[f64], candidates: &Matrix, tau: f64) -> Result<Vec<f64>> {
    Ok(softmax(&scaled_logits(online_cls, candidates, tau)?))
}

/// `(1 − α) · p + α · q`
pub fn smooth_targets(p: &[f64], q: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("alpha", format!("must lie in [0, 1], got {alpha}")));
    }
    if p.len() != q.len() {
        return Err(Error::shape("smooth_targets", p.len(), q.len()));
    }
    Ok(p.iter().zip(q).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect())
}

pub fn one_hot(len: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

fn cross_entropy_rows(targets: &[Vec<f64>], predictions: &[Vec<f64>]) -> Result<f64> {
    if targets.len() != predictions.len() || targets.is_empty() {
        return Err(Error::shape("contrastive rows", targets.len(), predictions.len()));
    }
    let mut total = 0.0;
    for (t, d) in targets.iter().zip(predictions) {
        if t.len() != d.len() {
            return Err(Error::shape("contrastive row length", t.len(), d.len()));
        }
        total -= t.iter().zip(d).map(|(tk, dk)| tk * dk.max(LOG_EPS).ln()).sum::<f64>();
    }
    Ok(total / targets.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveLoss {
    pub image_to_text: f64,
    pub text_to_image: f64,
    pub total: f64,
}

/// Cross-entropy between smoothed targets and predicted distributions, averaged
/// over both directions.
pub fn contrastive_loss(
    targets_i2t: &[Vec<f64>],
    predicted_i2t: &[Vec<f64>],
    targets_t2i: &[Vec<f64>],
    predicted_t2i: &[Vec<f64>],
) -> Result<ContrastiveLoss> {
    let image_to_text = cross_entropy_rows(targets_i2t, predicted_i2t)?;
    let text_to_image = cross_entropy_rows(targets_t2i, predicted_t2i)?;
    Ok(ContrastiveLoss { image_to_text, text_to_image, total: 0.5 * (image_to_text + text_to_image) })
}

/// Momentum-side inputs of one contrastive step.
#[derive(Debug, Clone, Copy)]
pub struct MomentumFeatures<'a> {
    /// `B × d_h` unit rows, in batch order.
    pub image: &'a Matrix,
    pub text: &'a Matrix,
    /// Queued features, oldest first; may have zero rows.
    pub image_queue: &'a Matrix,
    pub text_queue: &'a Matrix,
}

impl MomentumFeatures<'_> {
    pub fn text_candidates(&self) -> Matrix {
        Matrix::vstack(&[self.text, self.text_queue])
    }

    pub fn image_candidates(&self) -> Matrix {
        Matrix::vstack(&[self.image, self.image_queue])
    }
}

/// All target and prediction rows for a batch, both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTargets {
    pub p_i2t: Vec<Vec<f64>>,
    pub p_t2i: Vec<Vec<f64>>,
    pub q_i2t: Vec<Vec<f64>>,
    pub q_t2i: Vec<Vec<f64>>,
    pub smoothed_i2t: Vec<Vec<f64>>,
    pub smoothed_t2i: Vec<Vec<f64>>,
    pub d_i2t: Vec<Vec<f64>>,
    pub d_t2i: Vec<Vec<f64>>,
    pub alpha: f64,
    pub tau: f64,
}

impl AlignmentTargets {
    /// `online_image` and `online_text` are the online encoders' unit CLS rows.
    pub fn build(
        online_image: &Matrix,
        online_text: &Matrix,
        momentum: &MomentumFeatures<'_>,
        alpha: f64,
        tau: f64,
    ) -> Result<Self> {
        let b = online_image.rows();
        if online_text.rows() != b || momentum.image.rows() != b || momentum.text.rows() != b {
            return Err(Error::shape("alignment batch", b, online_text.rows()));
        }
        let text_cands = momentum.text_candidates();
        let image_cands = momentum.image_candidates();
        let mut out = Self {
            p_i2t: Vec::with_capacity(b),
            p_t2i: Vec::with_capacity(b),
            q_i2t: Vec::with_capacity(b),
            q_t2i: Vec::with_capacity(b),
            smoothed_i2t: Vec::with_capacity(b),
            smoothed_t2i: Vec::with_capacity(b),
            d_i2t: Vec::with_capacity(b),
            d_t2i: Vec::with_capacity(b),
            alpha,
            tau,
        };
        for n in 0..b {
            let p_i2t = one_hot(text_cands.rows(), n);
            let p_t2i = one_hot(image_cands.rows(), n);
            let q_i2t = pseudo_similarity(momentum.image.row(n), &text_cands, tau)?;
            let q_t2i = pseudo_similarity(momentum.text.row(n), &image_cands, tau)?;
            out.smoothed_i2t.push(smooth_targets(&p_i2t, &q_i2t, alpha)?);
            out.smoothed_t2i.push(smooth_targets(&p_t2i, &q_t2i, alpha)?);
            out.d_i2t.push(matching_distribution(online_image.row(n), &text_cands, tau)?);
            out.d_t2i.push(matching_distribution(online_text.row(n), &image_cands, tau)?);
            out.p_i2t.push(p_i2t);
            out.p_t2i.push(p_t2i);
            out.q_i2t.push(q_i2t);
            out.q_t2i.push(q_t2i);
        }
        Ok(out)
    }

    pub fn loss(&self) -> Result<ContrastiveLoss> {
        contrastive_loss(&self.smoothed_i2t, &self.d_i2t, &self.smoothed_t2i, &self.d_t2i)
    }
}

/// Tape handles of the contrastive term.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveVars {
    pub image_to_text: Var,
    pub text_to_image: Var,
    pub total: Var,
}

/// Records the contrastive loss on `tape`. Targets are computed from the
/// momentum features and enter as constants.
pub fn contrastive_forward(
    tape: &mut Tape,
    online_image: Var,
    online_text: Var,
    momentum: &MomentumFeatures<'_>,
    alpha: f64,
    tau: f64,
) -> Result<ContrastiveVars> {
    let targets = AlignmentTargets::build(tape.value(online_image), tape.value(online_text), momentum, alpha, tau)?;
    let b = targets.smoothed_i2t.len();
    let weights = vec![1.0 / b as f64; b];

    let text_cands = tape.constant(momentum.text_candidates());
    let image_cands = tape.constant(momentum.image_candidates());
    let sim_i2t = tape.matmul_t(online_image, text_cands);
    let logits_i2t = tape.scale(sim_i2t, 1.0 / tau);
    let sim_t2i = tape.matmul_t(online_text, image_cands);
    let logits_t2i = tape.scale(sim_t2i, 1.0 / tau);

    let image_to_text = tape.soft_cross_entropy(logits_i2t, Matrix::from_rows(&targets.smoothed_i2t), weights.clone());
    let text_to_image = tape.soft_cross_entropy(logits_t2i, Matrix::from_rows(&targets.smoothed_t2i), weights);
    let both = tape.sum(&[image_to_text, text_to_image]);
    let total = tape.scale(both, 0.5);
    Ok(ContrastiveVars { image_to_text, text_to_image, total })
}
