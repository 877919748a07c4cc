use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dataset, DatasetConfig, DatasetHeader, GoldSource, Sample, ValueType, Vocabulary};
use crate::error::Result;
use crate::tensor::Matrix;

const SIGNATURE_STREAM: u64 = 1 << 40;
const CATEGORY_STREAM: u64 = (1 << 40) + 1;
const TEST_STREAM_OFFSET: u64 = 1 << 32;

/// One random `d_img` signature per value id, shared by every sample of a seed.
pub fn value_signatures(config: &DatasetConfig) -> Matrix {
    gaussian_rows(config.seed, SIGNATURE_STREAM, config.n_values, config.d_img)
}

fn category_signatures(config: &DatasetConfig) -> Matrix {
    gaussian_rows(config.seed, CATEGORY_STREAM, config.n_categories, config.d_img)
}

fn gaussian_rows(seed: u64, stream: u64, rows: usize, cols: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Exactly `round(rate · n)` flags set, at random positions.
fn exact_flags(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<bool> {
    let count = (rate * n as f64).round() as usize;
    let mut flags: Vec<bool> = (0..n).map(|i| i < count).collect();
    flags.shuffle(rng);
    flags
}

struct SamplePlan {
    source: GoldSource,
    noisy: bool,
    test: bool,
}

/// Builds a train/test pair of synthetic splits. Pure in `config` (including its seed).
///
/// Every sample hides one true value set. Foreground patches carry the value
/// signature plus a category signature; background patches are noise or a
/// wrong value's signature. Text mentions the true value unless the sample is
/// image-sourced, and may mention a wrong value. Noisy train samples take that
/// mentioned wrong value as their weak label.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let vocab = Vocabulary::build(config.n_values, config.n_categories, config.vocab_size);
    let value_sigs = value_signatures(config);
    let category_sigs = category_signatures(config);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_train = config.n_train();
    let n_test = config.n_test();
    let train_image = exact_flags(&mut rng, n_train, config.frac_image_source);
    let train_noisy = exact_flags(&mut rng, n_train, config.label_noise_rate);
    let test_image = exact_flags(&mut rng, n_test, config.frac_image_source);

    let source = |image: bool| if image { GoldSource::Image } else { GoldSource::Text };
    let train = (0..n_train)
        .map(|i| {
            let plan = SamplePlan { source: source(train_image[i]), noisy: train_noisy[i], test: false };
            build_sample(config, &vocab, &value_sigs, &category_sigs, i as u64, format!("train-{i:06}"), &plan)
        })
        .collect();
    let test = (0..n_test)
        .map(|i| {
            let plan = SamplePlan { source: source(test_image[i]), noisy: false, test: true };
            let stream = TEST_STREAM_OFFSET + i as u64;
            build_sample(config, &vocab, &value_sigs, &category_sigs, stream, format!("test-{i:06}"), &plan)
        })
        .collect();

    Ok(Dataset { header: DatasetHeader::from_config(config), vocab, train, test })
}

fn build_sample(
    config: &DatasetConfig,
    vocab: &Vocabulary,
    value_sigs: &Matrix,
    category_sigs: &Matrix,
    stream: u64,
    id: String,
    plan: &SamplePlan,
) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let v = config.n_values;

    let category_id = rng.gen_range(0..config.n_categories);
    let n_true = match config.value_type {
        ValueType::Single => 1,
        ValueType::Multiple => rng.gen_range(1..=ValueType::Multiple.max_values().min(v - 1)),
    };
    let mut all_values: Vec<usize> = (0..v).collect();
    all_values.shuffle(&mut rng);
    let mut true_values = all_values[..n_true].to_vec();
    true_values.sort_unstable();
    let others = &all_values[n_true..];

    let distractor = if plan.noisy || rng.gen::<f64>() < config.text_distractor_rate {
        Some(others[rng.gen_range(0..others.len())])
    } else {
        None
    };

    let weak_label = if plan.noisy {
        let distractor = distractor.expect("noisy samples always mention a distractor");
        let mut weak = true_values.clone();
        let replaced = rng.gen_range(0..weak.len());
        weak[replaced] = distractor;
        weak.sort_unstable();
        weak
    } else {
        true_values.clone()
    };

    // Text: category word, value mentions, then filler up to a random length.
    let mention = |rng: &mut ChaCha8Rng, value: usize| {
        if rng.gen_bool(0.5) {
            vocab.canonical_token(value)
        } else {
            vocab.synonym_token(value)
        }
    };
    let mut tokens = vec![vocab.category_token(category_id)];
    if plan.source == GoldSource::Text {
        for &t in &true_values {
            tokens.push(mention(&mut rng, t));
        }
    }
    if let Some(d) = distractor {
        tokens.push(mention(&mut rng, d));
    }
    let min_len = tokens.len().max(config.t_max / 2);
    let len = rng.gen_range(min_len..=config.t_max);
    let filler = vocab.filler_range();
    while tokens.len() < len {
        tokens.push(rng.gen_range(filler.clone()));
    }
    tokens.shuffle(&mut rng);

    // Image: foreground patches at random positions, the rest background.
    let p = config.patches;
    let n_foreground = (p / 4).max(1);
    let mut positions: Vec<usize> = (0..p).collect();
    positions.shuffle(&mut rng);
    let mut foreground = positions[..n_foreground].to_vec();
    foreground.sort_unstable();
    let mut patches = Matrix::zeros(p, config.d_img);
    let mut fg_slot = 0;
    for patch in 0..p {
        let row = patches.row_mut(patch);
        if foreground.binary_search(&patch).is_ok() {
            let value = true_values[fg_slot % true_values.len()];
            fg_slot += 1;
            for (j, x) in row.iter_mut().enumerate() {
                let jitter: f64 = rng.sample(StandardNormal);
                *x = value_sigs.get(value, j) + category_sigs.get(category_id, j) + config.patch_jitter * jitter;
            }
        } else if rng.gen::<f64>() < config.background_distractor_rate {
            let value = others[rng.gen_range(0..others.len())];
            for (j, x) in row.iter_mut().enumerate() {
                let jitter: f64 = rng.sample(StandardNormal);
                *x = value_sigs.get(value, j) + config.patch_jitter * jitter;
            }
        } else {
            for x in row.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
        }
    }

    let noise_flag = weak_label != true_values;
    let (gold_label, gold_source) =
        if plan.test { (Some(true_values), Some(plan.source)) } else { (None, None) };

    Sample { id, patches, tokens, category_id, weak_label, gold_label, gold_source, noise_flag, foreground }
}
