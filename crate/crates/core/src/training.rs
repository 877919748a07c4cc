//! Composite objective and the optimization loop.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{contrastive_forward, MomentumFeatures};
use crate::autograd::{Gradients, Tape, Var};
use crate::data::{DatasetHeader, Sample, Vocabulary};
use crate::encoders::momentum_update;
use crate::error::{Error, Result};
use crate::fusion::Symbols;
use crate::model::{forward_sample, image_feature, predict, sample_logits, text_feature, Model, ModelDims, ModelState};
use crate::neighborhood::{reliability_table, ReliabilityTable};
use crate::params::Parameters;
use crate::tensor::Matrix;

/// Which bias-reduction schemes are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    /// Label-smoothed momentum contrast.
    pub s1: bool,
    /// Category-supervised patch pruning.
    pub s2: bool,
    /// Neighborhood-regularized sample weights.
    pub s3: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { s1: true, s2: true, s3: true }
    }
}

impl Toggles {
    pub fn none() -> Self {
        Self { s1: false, s2: false, s3: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub tau: f64,
    pub queue_size: usize,
    pub k: usize,
    /// Epoch from which prediction neighbors join the reliability weight.
    pub reliability_epoch: usize,
    pub momentum: f64,
    pub d_h: usize,
    pub seed: u64,
    pub toggles: Toggles,
    pub scale_sc: f64,
    pub scale_ct: f64,
    pub scale_rmlm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-5,
            weight_decay: 0.05,
            alpha: 0.4,
            tau: 0.07,
            queue_size: 512,
            k: 10,
            reliability_epoch: 2,
            momentum: 0.995,
            d_h: 32,
            seed: 0,
            toggles: Toggles::default(),
            scale_sc: 1.0,
            scale_ct: 1.0,
            scale_rmlm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "contrast needs at least 2 samples per batch"));
        }
        if self.queue_size < self.batch_size {
            return Err(Error::config("queue_size", "queue must hold at least one batch"));
        }
        if self.toggles.s3 && self.epochs > 0 && self.reliability_epoch > self.epochs {
            return Err(Error::config("reliability_epoch", "must not exceed epochs"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("tau", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1]"));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning_rate", "rates must be non-negative"));
        }
        if self.k == 0 {
            return Err(Error::config("k", "must be positive"));
        }
        if self.d_h == 0 {
            return Err(Error::config("d_h", "must be positive"));
        }
        Ok(())
    }

    /// Cosine-annealed rate at `step` out of `total_steps`.
    pub fn learning_rate_at(&self, step: usize, total_steps: usize) -> f64 {
        if total_steps == 0 {
            return self.learning_rate;
        }
        let progress = step as f64 / total_steps as f64;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Loss terms as they enter the total; disabled terms are exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub sc: f64,
    pub ct: f64,
    pub rmlm: f64,
    pub total: f64,
}

/// Momentum CLS features of the current batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumBatch {
    pub image: Matrix,
    pub text: Matrix,
}

pub fn momentum_batch(state: &ModelState, batch: &[&Sample]) -> Result<MomentumBatch> {
    let image = batch.iter().map(|s| image_feature(&state.momentum, s)).collect::<Result<Vec<_>>>()?;
    let text = batch.iter().map(|s| text_feature(&state.momentum, s)).collect::<Result<Vec<_>>>()?;
    Ok(MomentumBatch { image: Matrix::from_rows(&image), text: Matrix::from_rows(&text) })
}

/// Handles of the recorded objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub total: Var,
    pub sc: Option<Var>,
    pub ct: Option<Var>,
    pub rmlm: Var,
}

/// Records the composite objective of one batch on `tape`.
pub fn record_objective(
    tape: &mut Tape,
    state: &ModelState,
    batch: &[&Sample],
    weights: &[f64],
    momentum: Option<&MomentumBatch>,
    config: &TrainConfig,
) -> Result<ObjectiveVars> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if weights.len() != batch.len() {
        return Err(Error::shape("sample weights", batch.len(), weights.len()));
    }
    let model = &state.model;
    let toggles = config.toggles;
    let symbols: Symbols = model.decoder.symbols();
    let b = batch.len() as f64;

    let mut image_cls = Vec::with_capacity(batch.len());
    let mut text_cls = Vec::with_capacity(batch.len());
    let mut ct_logits = Vec::with_capacity(batch.len());
    let mut gen_terms = Vec::with_capacity(batch.len());
    for (sample, &w) in batch.iter().zip(weights) {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::InvalidInput(format!("sample weight {w} outside [0, 1]")));
        }
        let vars = forward_sample(tape, model, sample)?;
        image_cls.push(vars.visual.cls_normalized);
        text_cls.push(vars.text.cls_normalized);
        if let Some(cat) = vars.category {
            ct_logits.push((cat.logits, sample.category_id));
        }
        let labels = symbols.label_sequence(&sample.weak_label);
        let logits = sample_logits(tape, model, &vars, &labels)?;
        let mut targets = Matrix::zeros(labels.len(), symbols.outputs());
        for (step, &l) in labels.iter().enumerate() {
            targets.set(step, l, 1.0);
        }
        let s = if toggles.s3 { w } else { 1.0 };
        gen_terms.push(tape.soft_cross_entropy(logits, targets, vec![s / b; labels.len()]));
    }

    let rmlm_raw = tape.sum(&gen_terms);
    let rmlm = tape.scale(rmlm_raw, config.scale_rmlm);
    let mut parts = vec![rmlm];

    let ct = if model.pruning && toggles.s2 {
        let c = model.dims.n_categories;
        let mut terms = Vec::with_capacity(ct_logits.len());
        for (logits, category) in ct_logits {
            if category >= c {
                return Err(Error::InvalidInput(format!("category {category} out of range")));
            }
            let mut target = Matrix::zeros(1, c);
            target.set(0, category, 1.0);
            terms.push(tape.soft_cross_entropy(logits, target, vec![1.0 / b]));
        }
        let raw = tape.sum(&terms);
        let scaled = tape.scale(raw, config.scale_ct);
        parts.push(scaled);
        Some(scaled)
    } else {
        None
    };

    let sc = if toggles.s1 {
        let mb = momentum.ok_or_else(|| Error::InvalidInput("contrast needs momentum features".into()))?;
        let image_queue = state.image_queue.to_matrix();
        let text_queue = state.text_queue.to_matrix();
        let feats = MomentumFeatures { image: &mb.image, text: &mb.text, image_queue: &image_queue, text_queue: &text_queue };
        let online_image = tape.concat_rows(&image_cls);
        let online_text = tape.concat_rows(&text_cls);
        let vars = contrastive_forward(tape, online_image, online_text, &feats, config.alpha, config.tau)?;
        let scaled = tape.scale(vars.total, config.scale_sc);
        parts.push(scaled);
        Some(scaled)
    } else {
        None
    };

    let total = tape.sum(&parts);
    Ok(ObjectiveVars { total, sc, ct, rmlm })
}

fn components(tape: &Tape, vars: &ObjectiveVars) -> LossComponents {
    LossComponents {
        sc: vars.sc.map_or(0.0, |v| tape.scalar(v)),
        ct: vars.ct.map_or(0.0, |v| tape.scalar(v)),
        rmlm: tape.scalar(vars.rmlm),
        total: tape.scalar(vars.total),
    }
}

/// Value of the composite objective for one batch.
pub fn total_loss(state: &ModelState, batch: &[&Sample], weights: &[f64], config: &TrainConfig) -> Result<LossComponents> {
    let momentum = if config.toggles.s1 { Some(momentum_batch(state, batch)?) } else { None };
    let mut tape = Tape::frozen();
    let vars = record_objective(&mut tape, state, batch, weights, momentum.as_ref(), config)?;
    Ok(components(&tape, &vars))
}

/// Objective value and its gradient with respect to every online parameter.
pub fn loss_and_gradients(
    state: &ModelState,
    batch: &[&Sample],
    weights: &[f64],
    momentum: Option<&MomentumBatch>,
    config: &TrainConfig,
) -> Result<(LossComponents, Gradients)> {
    let mut tape = Tape::new();
    let vars = record_objective(&mut tape, state, batch, weights, momentum, config)?;
    let grads = tape.backward(vars.total);
    Ok((components(&tape, &vars), grads))
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    first: HashMap<&'static str, Vec<f64>>,
    second: HashMap<&'static str, Vec<f64>>,
    steps: u64,
}

impl AdamW {
    pub fn step(&mut self, params: &mut impl Parameters, grads: &Gradients, lr: f64, config: &TrainConfig) {
        self.steps += 1;
        let t = self.steps as i32;
        let bias1 = 1.0 - config.beta1.powi(t);
        let bias2 = 1.0 - config.beta2.powi(t);
        for (name, tensor) in params.tensors_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.first.entry(name).or_insert_with(|| vec![0.0; g.data().len()]);
            let v = self.second.entry(name).or_insert_with(|| vec![0.0; g.data().len()]);
            for (((theta, &grad), m), v) in tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *theta -= lr * config.weight_decay * *theta;
                *m = config.beta1 * *m + (1.0 - config.beta1) * grad;
                *v = config.beta2 * *v + (1.0 - config.beta2) * grad * grad;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *theta -= lr * m_hat / (v_hat.sqrt() + config.adam_eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub losses: LossComponents,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub steps: Vec<StepMetrics>,
    pub wall_clock_secs: f64,
}

impl TrainMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,L_sc,L_ct,L_rmlm,total,lr\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.step, s.epoch, s.losses.sc, s.losses.ct, s.losses.rmlm, s.losses.total, s.lr
            ));
        }
        out
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub metrics: TrainMetrics,
    /// One table per epoch at which weights were refreshed.
    pub weights: Vec<ReliabilityTable>,
}

/// Per-epoch reliability dump: `id, epoch, s_v, s_p, s, noise_flag`.
pub fn weights_csv(samples: &[Sample], tables: &[ReliabilityTable]) -> String {
    let mut out = String::from("id,epoch,s_v,s_p,s,noise_flag\n");
    for table in tables {
        for (sample, row) in samples.iter().zip(&table.rows) {
            let s_p = row.s_p.map_or_else(String::new, |v| v.to_string());
            out.push_str(&format!("{},{},{},{},{},{}\n", sample.id, table.epoch, row.s_v, s_p, row.s, sample.noise_flag));
        }
    }
    out
}

/// Initial model for a dataset under `config`.
pub fn initial_state(header: &DatasetHeader, vocab: &Vocabulary, config: &TrainConfig) -> Result<ModelState> {
    let dims = ModelDims::new(header, vocab, config.d_h);
    let model = Model::init(dims, header.value_type, vocab, config.toggles.s2, config.seed)?;
    Ok(ModelState::new(model, config.queue_size))
}

/// Unit visual features of every sample under the current online encoder.
pub fn visual_snapshot(model: &Model, samples: &[Sample]) -> Result<Matrix> {
    let rows = samples.iter().map(|s| image_feature(&model.encoder, s)).collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_rows(&rows))
}

pub fn predictions(model: &Model, samples: &[Sample]) -> Result<Vec<Vec<usize>>> {
    samples.iter().map(|s| predict(model, s).map(|g| g.values)).collect()
}

/// Sample weights for one epoch, from a snapshot of the current model.
pub fn refresh_weights(model: &Model, samples: &[Sample], epoch: usize, config: &TrainConfig) -> Result<ReliabilityTable> {
    let features = visual_snapshot(model, samples)?;
    let labels: Vec<Vec<usize>> = samples.iter().map(|s| s.weak_label.clone()).collect();
    let preds = if epoch >= config.reliability_epoch { Some(predictions(model, samples)?) } else { None };
    reliability_table(&features, &labels, preds.as_deref(), config.k, epoch, config.reliability_epoch)
}

pub fn train(samples: &[Sample], header: &DatasetHeader, vocab: &Vocabulary, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if config.toggles.s3 && config.k >= samples.len() {
        return Err(Error::config("k", format!("must be smaller than the training set ({})", samples.len())));
    }
    let started = Instant::now();
    let mut state = initial_state(header, vocab, config)?;
    let mut metrics = TrainMetrics::default();
    let mut tables = Vec::new();
    let mut optimizer = AdamW::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));

    let batches_per_epoch = samples.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut step = 0;
    for epoch in 0..config.epochs {
        let weights = if config.toggles.s3 {
            let table = refresh_weights(&state.model, samples, epoch, config)?;
            let w = table.weights();
            tables.push(table);
            w
        } else {
            vec![1.0; samples.len()]
        };

        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let batch_weights: Vec<f64> = chunk.iter().map(|&i| weights[i]).collect();
            let momentum = if config.toggles.s1 { Some(momentum_batch(&state, &batch)?) } else { None };
            let (losses, grads) = loss_and_gradients(&state, &batch, &batch_weights, momentum.as_ref(), config)?;
            if !losses.total.is_finite() {
                return Err(Error::Diverged { step, value: losses.total });
            }
            let lr = config.learning_rate_at(step, total_steps);
            optimizer.step(&mut state.model, &grads, lr, config);
            if let Some(mb) = momentum {
                momentum_update(&state.model.encoder, &mut state.momentum, config.momentum)?;
                state.image_queue.enqueue(&mb.image.to_rows())?;
                state.text_queue.enqueue(&mb.text.to_rows())?;
            }
            metrics.steps.push(StepMetrics { step, epoch, losses, lr });
            step += 1;
        }
    }
    metrics.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { state, metrics, weights: tables })
}
