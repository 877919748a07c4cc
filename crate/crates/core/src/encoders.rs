//! Visual and textual encoders, their momentum copies, and the feature queues.
//!
//! Both encoders are a linear embedding plus learned position vectors; the
//! CLS slot is the mean of the content embeddings plus a learned bias. The
//! mask head and category classifier live here too because they belong to
//! the visual encoder's parameter set.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::params::{gaussian, Parameters};
use crate::tensor::{l2_norm, Matrix};

/// Tolerance on unit norm accepted by [`MomentumQueue::enqueue`].
pub const QUEUE_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// `d_img × d_h`
    pub visual_proj: Matrix,
    /// `P × d_h`
    pub visual_pos: Matrix,
    /// `1 × d_h`
    pub visual_cls: Matrix,
    /// `vocab × d_h`
    pub token_embed: Matrix,
    /// `T_max × d_h`
    pub text_pos: Matrix,
    /// `1 × d_h`
    pub text_cls: Matrix,
    /// `d_h × 1` per-patch scoring head.
    pub mask_w: Matrix,
    /// `1 × 1`
    pub mask_b: Matrix,
    /// `d_h × C`
    pub category_w: Matrix,
    /// `1 × C`
    pub category_b: Matrix,
}

impl EncoderParams {
    pub fn init(dims: &ModelDims, rng: &mut impl Rng) -> Self {
        let h = dims.d_h;
        Self {
            visual_proj: gaussian(rng, dims.d_img, h, 1.0 / (dims.d_img as f64).sqrt()),
            visual_pos: gaussian(rng, dims.patches, h, 0.02),
            visual_cls: Matrix::zeros(1, h),
            token_embed: gaussian(rng, dims.vocab_size, h, 1.0),
            text_pos: gaussian(rng, dims.t_max, h, 0.02),
            text_cls: Matrix::zeros(1, h),
            mask_w: gaussian(rng, h, 1, 0.02),
            mask_b: Matrix::zeros(1, 1),
            category_w: gaussian(rng, h, dims.n_categories, 0.02),
            category_b: Matrix::zeros(1, dims.n_categories),
        }
    }

    pub fn patches(&self) -> usize {
        self.visual_pos.rows()
    }

    pub fn d_img(&self) -> usize {
        self.visual_proj.rows()
    }

    pub fn d_h(&self) -> usize {
        self.visual_proj.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embed.rows()
    }

    pub fn t_max(&self) -> usize {
        self.text_pos.rows()
    }
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("encoder.visual_proj", &self.visual_proj),
            ("encoder.visual_pos", &self.visual_pos),
            ("encoder.visual_cls", &self.visual_cls),
            ("encoder.token_embed", &self.token_embed),
            ("encoder.text_pos", &self.text_pos),
            ("encoder.text_cls", &self.text_cls),
            ("encoder.mask_w", &self.mask_w),
            ("encoder.mask_b", &self.mask_b),
            ("encoder.category_w", &self.category_w),
            ("encoder.category_b", &self.category_b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("encoder.visual_proj", &mut self.visual_proj),
            ("encoder.visual_pos", &mut self.visual_pos),
            ("encoder.visual_cls", &mut self.visual_cls),
            ("encoder.token_embed", &mut self.token_embed),
            ("encoder.text_pos", &mut self.text_pos),
            ("encoder.text_cls", &mut self.text_cls),
            ("encoder.mask_w", &mut self.mask_w),
            ("encoder.mask_b", &mut self.mask_b),
            ("encoder.category_w", &mut self.category_w),
            ("encoder.category_b", &mut self.category_b),
        ]
    }
}

/// Output of one encoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingResult {
    /// CLS at row 0, then one row per patch or token.
    pub sequence: Matrix,
    pub cls: Vec<f64>,
    pub cls_normalized: Vec<f64>,
}

/// Tape handles for an encoder pass. `content` excludes the CLS row.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub content: Var,
    pub cls: Var,
    pub cls_normalized: Var,
}

impl EncoderVars {
    pub fn sequence(&self, tape: &mut Tape) -> Var {
        tape.concat_rows(&[self.cls, self.content])
    }
}

pub fn visual_forward(tape: &mut Tape, params: &EncoderParams, patches: &Matrix) -> Result<EncoderVars> {
    if patches.shape() != (params.patches(), params.d_img()) {
        return Err(Error::shape(
            "encode_image",
            format!("{} x {}", params.patches(), params.d_img()),
            format!("{} x {}", patches.rows(), patches.cols()),
        ));
    }
    let x = tape.constant(patches.clone());
    let proj = tape.param("encoder.visual_proj", &params.visual_proj);
    let pos = tape.param("encoder.visual_pos", &params.visual_pos);
    let cls_bias = tape.param("encoder.visual_cls", &params.visual_cls);
    let projected = tape.matmul(x, proj);
    let content = tape.add(projected, pos);
    let pooled = tape.mean_rows(projected);
    let cls = tape.add(pooled, cls_bias);
    let cls_normalized = tape.normalize_rows(cls);
    Ok(EncoderVars { content, cls, cls_normalized })
}

pub fn text_forward(tape: &mut Tape, params: &EncoderParams, tokens: &[usize]) -> Result<EncoderVars> {
    if tokens.is_empty() || tokens.len() > params.t_max() {
        return Err(Error::shape("encode_text", format!("1..={} tokens", params.t_max()), tokens.len()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= params.vocab_size()) {
        return Err(Error::InvalidInput(format!(
            "token id {bad} out of vocabulary (size {})",
            params.vocab_size()
        )));
    }
    let table = tape.param("encoder.token_embed", &params.token_embed);
    let pos_table = tape.param("encoder.text_pos", &params.text_pos);
    let cls_bias = tape.param("encoder.text_cls", &params.text_cls);
    let embedded = tape.gather(table, tokens);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = tape.gather(pos_table, &positions);
    let content = tape.add(embedded, pos);
    let pooled = tape.mean_rows(embedded);
    let cls = tape.add(pooled, cls_bias);
    let cls_normalized = tape.normalize_rows(cls);
    Ok(EncoderVars { content, cls, cls_normalized })
}

fn collect(tape: &mut Tape, vars: EncoderVars) -> EncodingResult {
    let sequence = vars.sequence(tape);
    EncodingResult {
        sequence: tape.value(sequence).clone(),
        cls: tape.value(vars.cls).row(0).to_vec(),
        cls_normalized: tape.value(vars.cls_normalized).row(0).to_vec(),
    }
}

/// Encodes a `P × d_img` patch grid into `P + 1` embeddings.
pub fn encode_image(params: &EncoderParams, patches: &Matrix) -> Result<EncodingResult> {
    let mut tape = Tape::frozen();
    let vars = visual_forward(&mut tape, params, patches)?;
    Ok(collect(&mut tape, vars))
}

/// Encodes a token sequence into `T + 1` embeddings.
pub fn encode_text(params: &EncoderParams, tokens: &[usize]) -> Result<EncodingResult> {
    let mut tape = Tape::frozen();
    let vars = text_forward(&mut tape, params, tokens)?;
    Ok(collect(&mut tape, vars))
}

/// `momentum ← m · momentum + (1 − m) · online`, tensor by tensor.
pub fn momentum_update(online: &EncoderParams, momentum: &mut EncoderParams, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::config("momentum", format!("coefficient must lie in [0, 1], got {m}")));
    }
    let sources = online.tensors();
    let mut targets = momentum.tensors_mut();
    for ((name, src), (_, dst)) in sources.iter().zip(targets.iter_mut()) {
        if src.shape() != dst.shape() {
            return Err(Error::shape("momentum_update", format!("{:?}", src.shape()), format!("{name}: {:?}", dst.shape())));
        }
    }
    for ((_, src), (_, dst)) in sources.into_iter().zip(targets) {
        for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d = m * *d + (1.0 - m) * s;
        }
    }
    Ok(())
}

/// Fixed-capacity FIFO of unit-norm feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl MomentumQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self { capacity, dim, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }

    pub fn to_matrix(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.entries.len() * self.dim);
        for e in &self.entries {
            data.extend_from_slice(e);
        }
        Matrix::from_vec(self.entries.len(), self.dim, data)
    }

    /// Appends a batch in order, evicting the oldest entries beyond capacity.
    /// The whole batch is rejected if any vector is off the unit sphere.
    pub fn enqueue(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        for (i, v) in batch.iter().enumerate() {
            if v.len() != self.dim {
                return Err(Error::shape("enqueue", self.dim, v.len()));
            }
            let norm = l2_norm(v);
            if (norm - 1.0).abs() > QUEUE_NORM_TOLERANCE {
                return Err(Error::InvalidInput(format!("queue entry {i} has norm {norm}, expected 1")));
            }
        }
        for v in batch {
            if self.capacity == 0 {
                break;
            }
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(v.clone());
        }
        Ok(())
    }
}
