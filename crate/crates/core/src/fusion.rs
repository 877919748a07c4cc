//! Question-prompt grounding and generative value decoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var, LOG_EPS};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::params::{gaussian, Parameters};
use crate::tensor::{softmax, Matrix};

const PROMPT_WORDS: [&str; 6] = ["[CLS-Q]", "what", "is", "the", "of", "?"];
const CLS_Q: usize = 0;
const WHAT: usize = 1;
const IS: usize = 2;
const THE: usize = 3;
const OF: usize = 4;
const QUESTION_MARK: usize = 5;

/// Number of tokens in every prompt, CLS-Q included.
pub const PROMPT_LEN: usize = 9;

/// Longest decoded value sequence.
pub const MAX_DECODE_VALUES: usize = 3;

pub fn prompt_vocab_size(vocab: &Vocabulary) -> usize {
    PROMPT_WORDS.len() + vocab.attributes.len() + vocab.categories.len()
}

/// `[CLS-Q] what is the <attribute> of the <category> ?`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<usize>,
    pub words: Vec<String>,
}

pub fn build_prompt(attribute_id: usize, category_id: usize, vocab: &Vocabulary) -> Result<Prompt> {
    let attribute = vocab
        .attributes
        .get(attribute_id)
        .ok_or_else(|| Error::InvalidInput(format!("unknown attribute id {attribute_id}")))?;
    let category = vocab
        .categories
        .get(category_id)
        .ok_or_else(|| Error::InvalidInput(format!("unknown category id {category_id}")))?;
    let attr_token = PROMPT_WORDS.len() + attribute_id;
    let cat_token = PROMPT_WORDS.len() + vocab.attributes.len() + category_id;
    let tokens = vec![CLS_Q, WHAT, IS, THE, attr_token, OF, THE, cat_token, QUESTION_MARK];
    let word = |t: usize| match t {
        t if t < PROMPT_WORDS.len() => PROMPT_WORDS[t].to_string(),
        t if t == attr_token => attribute.clone(),
        _ => category.clone(),
    };
    let words = tokens.iter().map(|&t| word(t)).collect();
    Ok(Prompt { tokens, words })
}

/// Decoder symbol layout: values `[0, V)`, then NONE, END and BOS.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Symbols {
    pub n_values: usize,
}

impl Symbols {
    pub fn none(self) -> usize {
        self.n_values
    }

    pub fn end(self) -> usize {
        self.n_values + 1
    }

    pub fn bos(self) -> usize {
        self.n_values + 2
    }

    /// Size of the output distribution (values, NONE, END).
    pub fn outputs(self) -> usize {
        self.n_values + 2
    }

    /// Sorted value ids followed by END.
    pub fn label_sequence(self, values: &[usize]) -> Vec<usize> {
        let mut seq = values.to_vec();
        seq.sort_unstable();
        seq.dedup();
        seq.push(self.end());
        seq
    }

    /// Decoder inputs for teacher forcing: BOS then every label but the last.
    pub fn teacher_inputs(self, label_sequence: &[usize]) -> Vec<usize> {
        std::iter::once(self.bos()).chain(label_sequence[..label_sequence.len() - 1].iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub prompt_embed: Matrix,
    pub prompt_pos: Matrix,
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

impl FusionParams {
    pub fn init(dims: &ModelDims, rng: &mut impl Rng) -> Self {
        let h = dims.d_h;
        let proj_std = 1.0 / (h as f64).sqrt();
        Self {
            prompt_embed: gaussian(rng, dims.prompt_vocab, h, 1.0),
            prompt_pos: gaussian(rng, dims.prompt_len, h, 0.02),
            query: gaussian(rng, h, h, proj_std),
            key: gaussian(rng, h, h, proj_std),
            value: gaussian(rng, h, h, proj_std),
        }
    }
}

impl Parameters for FusionParams {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("fusion.prompt_embed", &self.prompt_embed),
            ("fusion.prompt_pos", &self.prompt_pos),
            ("fusion.query", &self.query),
            ("fusion.key", &self.key),
            ("fusion.value", &self.value),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("fusion.prompt_embed", &mut self.prompt_embed),
            ("fusion.prompt_pos", &mut self.prompt_pos),
            ("fusion.query", &mut self.query),
            ("fusion.key", &mut self.key),
            ("fusion.value", &mut self.value),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    /// `(V + 3) × d_h`, indexed by [`Symbols`].
    pub embed: Matrix,
    /// `(MAX_DECODE_VALUES + 1) × d_h`
    pub pos: Matrix,
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    /// `d_h × (V + 2)`
    pub head_w: Matrix,
    pub head_b: Matrix,
}

impl DecoderParams {
    pub fn init(dims: &ModelDims, rng: &mut impl Rng) -> Self {
        let h = dims.d_h;
        let proj_std = 1.0 / (h as f64).sqrt();
        let symbols = Symbols { n_values: dims.n_values };
        Self {
            embed: gaussian(rng, symbols.bos() + 1, h, 1.0),
            pos: gaussian(rng, MAX_DECODE_VALUES + 1, h, 0.02),
            query: gaussian(rng, h, h, proj_std),
            key: gaussian(rng, h, h, proj_std),
            value: gaussian(rng, h, h, proj_std),
            head_w: gaussian(rng, h, symbols.outputs(), proj_std),
            head_b: Matrix::zeros(1, symbols.outputs()),
        }
    }

    pub fn symbols(&self) -> Symbols {
        Symbols { n_values: self.head_w.cols() - 2 }
    }
}

impl Parameters for DecoderParams {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("decoder.embed", &self.embed),
            ("decoder.pos", &self.pos),
            ("decoder.query", &self.query),
            ("decoder.key", &self.key),
            ("decoder.value", &self.value),
            ("decoder.head_w", &self.head_w),
            ("decoder.head_b", &self.head_b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("decoder.embed", &mut self.embed),
            ("decoder.pos", &mut self.pos),
            ("decoder.query", &mut self.query),
            ("decoder.key", &mut self.key),
            ("decoder.value", &mut self.value),
            ("decoder.head_w", &mut self.head_w),
            ("decoder.head_b", &mut self.head_b),
        ]
    }
}

/// Prompt token embeddings with positions, `Q × d_h`.
pub fn prompt_forward(tape: &mut Tape, params: &FusionParams, prompt: &[usize]) -> Result<Var> {
    if prompt.len() > params.prompt_pos.rows() {
        return Err(Error::shape("prompt length", params.prompt_pos.rows(), prompt.len()));
    }
    if let Some(&bad) = prompt.iter().find(|&&t| t >= params.prompt_embed.rows()) {
        return Err(Error::InvalidInput(format!("prompt token {bad} out of range")));
    }
    let table = tape.param("fusion.prompt_embed", &params.prompt_embed);
    let pos_table = tape.param("fusion.prompt_pos", &params.prompt_pos);
    let emb = tape.gather(table, prompt);
    let positions: Vec<usize> = (0..prompt.len()).collect();
    let pos = tape.gather(pos_table, &positions);
    Ok(tape.add(emb, pos))
}

/// Scaled dot-product cross-attention with a residual on the queries.
fn cross_attention(tape: &mut Tape, queries: Var, keys: Var, proj: [Var; 3], d_h: usize) -> (Var, Var) {
    let [wq, wk, wv] = proj;
    let q = tape.matmul(queries, wq);
    let k = tape.matmul(keys, wk);
    let v = tape.matmul(keys, wv);
    let scores = tape.matmul_t(q, k);
    let scaled = tape.scale(scores, 1.0 / (d_h as f64).sqrt());
    let attn = tape.softmax_rows(scaled);
    let mixed = tape.matmul(attn, v);
    (tape.add(mixed, queries), attn)
}

/// Grounds prompt positions in the concatenated visual + text sequence.
/// Returns `(grounded, attention)`.
pub fn fusion_forward(tape: &mut Tape, params: &FusionParams, prompt: Var, keys: Var) -> Result<(Var, Var)> {
    if tape.value(keys).rows() == 0 {
        return Err(Error::InvalidInput("fusion needs at least one key position".into()));
    }
    let d_h = params.query.rows();
    let proj = [
        tape.param("fusion.query", &params.query),
        tape.param("fusion.key", &params.key),
        tape.param("fusion.value", &params.value),
    ];
    Ok(cross_attention(tape, prompt, keys, proj, d_h))
}

/// Grounded prompt sequence and its attention over key positions.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundedRepresentation {
    pub sequence: Matrix,
    pub attention: Matrix,
}

pub fn fuse(params: &FusionParams, prompt_embeddings: &Matrix, keys: &Matrix) -> Result<GroundedRepresentation> {
    let d_h = params.query.rows();
    if prompt_embeddings.cols() != d_h || keys.cols() != d_h {
        return Err(Error::shape("fuse width", d_h, format!("{} / {}", prompt_embeddings.cols(), keys.cols())));
    }
    let mut tape = Tape::frozen();
    let q = tape.constant(prompt_embeddings.clone());
    let k = tape.constant(keys.clone());
    let (grounded, attention) = fusion_forward(&mut tape, params, q, k)?;
    Ok(GroundedRepresentation { sequence: tape.value(grounded).clone(), attention: tape.value(attention).clone() })
}

/// Decoder logits for every input position, `L × (V + 2)`.
pub fn decoder_forward(tape: &mut Tape, params: &DecoderParams, grounded: Var, inputs: &[usize]) -> Result<Var> {
    if inputs.is_empty() || inputs.len() > params.pos.rows() {
        return Err(Error::shape("decoder inputs", format!("1..={}", params.pos.rows()), inputs.len()));
    }
    let d_h = params.query.rows();
    let table = tape.param("decoder.embed", &params.embed);
    let pos_table = tape.param("decoder.pos", &params.pos);
    let emb = tape.gather(table, inputs);
    let positions: Vec<usize> = (0..inputs.len()).collect();
    let pos = tape.gather(pos_table, &positions);
    let hidden = tape.add(emb, pos);

    let self_scores = tape.matmul_t(hidden, hidden);
    let self_scaled = tape.scale(self_scores, 1.0 / (d_h as f64).sqrt());
    let self_attn = tape.causal_softmax_rows(self_scaled);
    let self_mixed = tape.matmul(self_attn, hidden);
    let after_self = tape.add(self_mixed, hidden);

    let proj = [
        tape.param("decoder.query", &params.query),
        tape.param("decoder.key", &params.key),
        tape.param("decoder.value", &params.value),
    ];
    let (after_cross, _) = cross_attention(tape, after_self, grounded, proj, d_h);
    let head_w = tape.param("decoder.head_w", &params.head_w);
    let head_b = tape.param("decoder.head_b", &params.head_b);
    let projected = tape.matmul(after_cross, head_w);
    Ok(tape.add_row(projected, head_b))
}

/// Output of greedy decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Emitted symbols, including the terminating END or NONE if any.
    pub symbols: Vec<usize>,
    /// One output distribution per step.
    pub probabilities: Vec<Vec<f64>>,
    /// Sorted predicted value ids; empty means the model abstained (NONE).
    pub values: Vec<usize>,
}

impl Generation {
    pub fn is_none(&self) -> bool {
        self.values.is_empty()
    }
}

/// Greedy decoding over a grounded sequence, emitting at most `max_values` values.
pub fn decode(params: &DecoderParams, grounded: &Matrix, max_values: usize) -> Result<Generation> {
    if grounded.rows() == 0 {
        return Err(Error::InvalidInput("decode needs a grounded representation".into()));
    }
    let symbols = params.symbols();
    let cap = max_values.clamp(1, MAX_DECODE_VALUES);
    let mut inputs = vec![symbols.bos()];
    let mut out = Generation { symbols: Vec::new(), probabilities: Vec::new(), values: Vec::new() };
    while out.values.len() < cap {
        let mut tape = Tape::frozen();
        let g = tape.constant(grounded.clone());
        let logits = decoder_forward(&mut tape, params, g, &inputs)?;
        let last = tape.value(logits).row(inputs.len() - 1);
        let probs = softmax(last);
        let best = argmax(&probs);
        out.probabilities.push(probs);
        out.symbols.push(best);
        if best == symbols.end() {
            break;
        }
        if best == symbols.none() {
            out.values.clear();
            break;
        }
        if !out.values.contains(&best) {
            out.values.push(best);
        }
        inputs.push(best);
    }
    out.values.sort_unstable();
    Ok(out)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `s · Σ_steps −log p(label_step)` for one sample.
pub fn generation_loss(probabilities: &[Vec<f64>], labels: &[usize], weight: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::InvalidInput(format!("sample weight must lie in [0, 1], got {weight}")));
    }
    if probabilities.len() != labels.len() {
        return Err(Error::shape("generation steps", labels.len(), probabilities.len()));
    }
    let mut total = 0.0;
    for (row, &label) in probabilities.iter().zip(labels) {
        let p = *row.get(label).ok_or_else(|| Error::InvalidInput(format!("label symbol {label} out of range")))?;
        total -= p.max(LOG_EPS).ln();
    }
    Ok(weight * total)
}

/// Per-step teacher-forced distributions for a label sequence.
pub fn teacher_forced_probabilities(params: &DecoderParams, grounded: &Matrix, label_sequence: &[usize]) -> Result<Vec<Vec<f64>>> {
    let inputs = params.symbols().teacher_inputs(label_sequence);
    let mut tape = Tape::frozen();
    let g = tape.constant(grounded.clone());
    let logits = decoder_forward(&mut tape, params, g, &inputs)?;
    let m = tape.value(logits);
    Ok((0..m.rows()).map(|r| softmax(m.row(r))).collect())
}

#[cfg(test)]
pub(crate) fn attention_row_sums(attention: &Matrix) -> Vec<f64> {
    (0..attention.rows()).map(|r| attention.row(r).iter().sum()).collect()
}
