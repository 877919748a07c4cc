//! Full model: encoders, fusion and decoder, plus the momentum state and
//! checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{DatasetHeader, Sample, ValueType, Vocabulary, FORMAT_VERSION};
use crate::encoders::{text_forward, visual_forward, EncoderParams, EncoderVars, MomentumQueue};
use crate::error::{Error, Result};
use crate::fusion::{
    build_prompt, decode, decoder_forward, fusion_forward, prompt_forward, prompt_vocab_size, DecoderParams,
    FusionParams, Generation, PROMPT_LEN,
};
use crate::params::Parameters;
use crate::pruning::{category_forward, prune_forward, AttentionMask, CategoryVars};
use crate::tensor::Matrix;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub patches: usize,
    pub d_img: usize,
    pub d_h: usize,
    pub vocab_size: usize,
    pub t_max: usize,
    pub n_categories: usize,
    pub n_values: usize,
    pub prompt_vocab: usize,
    pub prompt_len: usize,
}

impl ModelDims {
    pub fn new(header: &DatasetHeader, vocab: &Vocabulary, d_h: usize) -> Self {
        Self {
            patches: header.patches,
            d_img: header.d_img,
            d_h,
            vocab_size: vocab.tokens.len(),
            t_max: header.t_max,
            n_categories: header.n_categories,
            n_values: header.n_values,
            prompt_vocab: prompt_vocab_size(vocab),
            prompt_len: PROMPT_LEN,
        }
    }

    /// Small shapes for unit tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            patches: 4,
            d_img: 3,
            d_h: 6,
            vocab_size: 20,
            t_max: 6,
            n_categories: 3,
            n_values: 4,
            prompt_vocab: 10,
            prompt_len: PROMPT_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub value_type: ValueType,
    /// Whether patch gating sits between the visual encoder and fusion.
    pub pruning: bool,
    /// Prompt tokens per category id.
    pub prompts: Vec<Vec<usize>>,
    pub encoder: EncoderParams,
    pub fusion: FusionParams,
    pub decoder: DecoderParams,
}

impl Model {
    pub fn init(dims: ModelDims, value_type: ValueType, vocab: &Vocabulary, pruning: bool, seed: u64) -> Result<Self> {
        let prompts = (0..dims.n_categories)
            .map(|c| build_prompt(0, c, vocab).map(|p| p.tokens))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            dims,
            value_type,
            pruning,
            prompts,
            encoder: EncoderParams::init(&dims, &mut rng),
            fusion: FusionParams::init(&dims, &mut rng),
            decoder: DecoderParams::init(&dims, &mut rng),
        })
    }

    pub fn max_values(&self) -> usize {
        self.value_type.max_values()
    }
}

impl Parameters for Model {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut all = self.encoder.tensors();
        all.extend(self.fusion.tensors());
        all.extend(self.decoder.tensors());
        all
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut all = self.encoder.tensors_mut();
        all.extend(self.fusion.tensors_mut());
        all.extend(self.decoder.tensors_mut());
        all
    }
}

/// Tape handles of one sample's forward pass up to the grounded representation.
#[derive(Debug, Clone, Copy)]
pub struct SampleVars {
    pub visual: EncoderVars,
    pub text: EncoderVars,
    pub category: Option<CategoryVars>,
    pub grounded: Var,
}

pub fn forward_sample(tape: &mut Tape, model: &Model, sample: &Sample) -> Result<SampleVars> {
    let visual = visual_forward(tape, &model.encoder, &sample.patches)?;
    let text = text_forward(tape, &model.encoder, &sample.tokens)?;
    let (category, patches) = if model.pruning {
        let cat = category_forward(tape, &model.encoder, visual.content)?;
        let gated = prune_forward(tape, visual.content, cat.scores);
        (Some(cat), gated)
    } else {
        (None, visual.content)
    };
    let keys = tape.concat_rows(&[visual.cls, patches, text.cls, text.content]);
    let prompt_tokens = model
        .prompts
        .get(sample.category_id)
        .ok_or_else(|| Error::InvalidInput(format!("sample {}: category {} has no prompt", sample.id, sample.category_id)))?;
    let prompt = prompt_forward(tape, &model.fusion, prompt_tokens)?;
    let (grounded, _) = fusion_forward(tape, &model.fusion, prompt, keys)?;
    Ok(SampleVars { visual, text, category, grounded })
}

/// Teacher-forced decoder logits for a label sequence.
pub fn sample_logits(tape: &mut Tape, model: &Model, vars: &SampleVars, label_sequence: &[usize]) -> Result<Var> {
    let inputs = model.decoder.symbols().teacher_inputs(label_sequence);
    decoder_forward(tape, &model.decoder, vars.grounded, &inputs)
}

pub fn predict(model: &Model, sample: &Sample) -> Result<Generation> {
    let mut tape = Tape::frozen();
    let vars = forward_sample(&mut tape, model, sample)?;
    let grounded = tape.value(vars.grounded).clone();
    decode(&model.decoder, &grounded, model.max_values())
}

/// Unit-norm visual CLS feature.
pub fn image_feature(encoder: &EncoderParams, sample: &Sample) -> Result<Vec<f64>> {
    let mut tape = Tape::frozen();
    let vars = visual_forward(&mut tape, encoder, &sample.patches)?;
    Ok(tape.value(vars.cls_normalized).row(0).to_vec())
}

/// Unit-norm text CLS feature.
pub fn text_feature(encoder: &EncoderParams, sample: &Sample) -> Result<Vec<f64>> {
    let mut tape = Tape::frozen();
    let vars = text_forward(&mut tape, encoder, &sample.tokens)?;
    Ok(tape.value(vars.cls_normalized).row(0).to_vec())
}

/// The patch mask the model would apply to this sample.
pub fn patch_mask(model: &Model, sample: &Sample) -> Result<AttentionMask> {
    let mut tape = Tape::frozen();
    let vars = visual_forward(&mut tape, &model.encoder, &sample.patches)?;
    let cat = category_forward(&mut tape, &model.encoder, vars.content)?;
    let scores = tape.value(cat.scores);
    Ok(AttentionMask::from_logits((0..scores.rows()).map(|r| scores.get(r, 0)).collect()))
}

/// Everything the training loop mutates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub model: Model,
    pub momentum: EncoderParams,
    pub image_queue: MomentumQueue,
    pub text_queue: MomentumQueue,
}

impl ModelState {
    pub fn new(model: Model, queue_size: usize) -> Self {
        let d_h = model.dims.d_h;
        Self {
            momentum: model.encoder.clone(),
            image_queue: MomentumQueue::new(queue_size, d_h),
            text_queue: MomentumQueue::new(queue_size, d_h),
            model,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    dataset: DatasetHeader,
    dims: ModelDims,
    value_type: ValueType,
    pruning: bool,
    prompts: Vec<Vec<usize>>,
    params: BTreeMap<String, Matrix>,
    momentum: BTreeMap<String, Matrix>,
    image_queue: MomentumQueue,
    text_queue: MomentumQueue,
}

fn named(params: &impl Parameters) -> BTreeMap<String, Matrix> {
    params.tensors().into_iter().map(|(n, m)| (n.to_string(), m.clone())).collect()
}

fn restore(target: &mut impl Parameters, source: &BTreeMap<String, Matrix>) -> Result<()> {
    for (name, slot) in target.tensors_mut() {
        let value = source
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("checkpoint is missing tensor {name}")))?;
        if value.shape() != slot.shape() {
            return Err(Error::shape("checkpoint tensor", format!("{:?}", slot.shape()), format!("{name}: {:?}", value.shape())));
        }
        *slot = value.clone();
    }
    Ok(())
}

/// The dataset header a checkpoint was trained against.
pub fn dataset_header_for(dims: &ModelDims, value_type: ValueType) -> DatasetHeader {
    DatasetHeader {
        version: FORMAT_VERSION,
        patches: dims.patches,
        d_img: dims.d_img,
        t_max: dims.t_max,
        n_categories: dims.n_categories,
        n_values: dims.n_values,
        value_type,
    }
}

pub fn checkpoint_json(state: &ModelState) -> Result<String> {
    let m = &state.model;
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        dataset: dataset_header_for(&m.dims, m.value_type),
        dims: m.dims,
        value_type: m.value_type,
        pruning: m.pruning,
        prompts: m.prompts.clone(),
        params: named(m),
        momentum: named(&state.momentum),
        image_queue: state.image_queue.clone(),
        text_queue: state.text_queue.clone(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_json(state)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::InvalidInput(format!("unsupported checkpoint version {}", file.version)));
    }
    // Placeholder tensors with the right shapes, overwritten below.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dims = file.dims;
    let mut model = Model {
        dims,
        value_type: file.value_type,
        pruning: file.pruning,
        prompts: file.prompts,
        encoder: EncoderParams::init(&dims, &mut rng),
        fusion: FusionParams::init(&dims, &mut rng),
        decoder: DecoderParams::init(&dims, &mut rng),
    };
    restore(&mut model, &file.params)?;
    let mut momentum = model.encoder.clone();
    restore(&mut momentum, &file.momentum)?;
    Ok(ModelState { model, momentum, image_queue: file.image_queue, text_queue: file.text_queue })
}
