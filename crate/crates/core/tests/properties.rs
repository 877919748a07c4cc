//! Property tests over the public API.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vtx_core::alignment::{contrastive_loss, matching_distribution, one_hot};
use vtx_core::data::{
    generate_dataset, load_dataset, save_dataset, DatasetConfig, GoldSource, Sample, ValueType,
};
use vtx_core::encoders::{encode_image, encode_text, momentum_update, EncoderParams, MomentumQueue};
use vtx_core::evaluation::{match_prediction, parse_csv, rows_to_csv, source_aware_report, EvalRecord, SourceAwareReport};
use vtx_core::model::{predict, ModelDims, ModelState};
use vtx_core::neighborhood::reliability_table;
use vtx_core::params::Parameters;
use vtx_core::pruning::{prune, AttentionMask};
use vtx_core::tensor::{l2_norm, Matrix};
use vtx_core::training::{initial_state, loss_and_gradients, momentum_batch, total_loss, train, Toggles, TrainConfig};

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = l2_norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn distance(a: &impl Parameters, b: &impl Parameters) -> f64 {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .flat_map(|((_, x), (_, y))| x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).collect::<Vec<_>>())
        .sum::<f64>()
        .sqrt()
}

fn descend(state: &mut ModelState, grads: &vtx_core::autograd::Gradients, lr: f64) {
    for (name, tensor) in state.model.tensors_mut() {
        if let Some(g) = grads.get(name) {
            for (w, d) in tensor.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
    }
}

fn small_dataset(n: usize, seed: u64, test_fraction: f64) -> vtx_core::data::Dataset {
    generate_dataset(&DatasetConfig { n_samples: n, seed, test_fraction, ..DatasetConfig::default() }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ema_contracts_geometrically(seed in 0u64..1000, m in 0.9f64..0.999) {
        let dims = ModelDims::tiny();
        let online = EncoderParams::init(&dims, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut momentum = EncoderParams::init(&dims, &mut ChaCha8Rng::seed_from_u64(seed + 1));
        let gap = distance(&online, &momentum);
        for _ in 0..100 {
            momentum_update(&online, &mut momentum, m).unwrap();
        }
        prop_assert!(distance(&online, &momentum) < m.powi(100) * gap * (1.0 + 1e-9));
    }

    #[test]
    fn encoders_are_pure(seed in 0u64..1000) {
        let dims = ModelDims::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = EncoderParams::init(&dims, &mut rng);
        let before = params.clone();
        let patches = gaussian(&mut rng, dims.patches, dims.d_img);
        let tokens: Vec<usize> = (0..dims.t_max).map(|_| rng.gen_range(0..dims.vocab_size)).collect();
        prop_assert_eq!(encode_image(&params, &patches).unwrap(), encode_image(&params, &patches).unwrap());
        prop_assert_eq!(encode_text(&params, &tokens).unwrap(), encode_text(&params, &tokens).unwrap());
        prop_assert_eq!(params, before);
    }

    #[test]
    fn contrast_is_nonnegative_and_shift_invariant(
        seed in 0u64..1000,
        b in 2usize..8,
        d in 2usize..12,
        tau in 0.05f64..1.0,
        alpha in 0.0f64..=1.0,
        a in -2.0f64..2.0,
        c in -2.0f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, d)).collect();
        let candidates = Matrix::from_rows(&(0..b).map(|_| unit(&mut rng, d)).collect::<Vec<_>>());
        let targets: Vec<Vec<f64>> = (0..b)
            .map(|n| {
                let q = matching_distribution(&unit(&mut rng, d), &candidates, tau).unwrap();
                one_hot(b, n).iter().zip(&q).map(|(p, q)| (1.0 - alpha) * p + alpha * q).collect()
            })
            .collect();
        let plain: Vec<Vec<f64>> = online.iter().map(|o| matching_distribution(o, &candidates, tau).unwrap()).collect();
        let base = contrastive_loss(&targets, &plain, &targets, &plain).unwrap().total;
        prop_assert!(base >= 0.0);

        // An extra coordinate adds the same constant a·c/τ to every logit.
        let widened_cands = Matrix::from_rows(
            &candidates.to_rows().into_iter().map(|mut r| { r.push(c); r }).collect::<Vec<_>>(),
        );
        let shifted: Vec<Vec<f64>> = online
            .iter()
            .map(|o| {
                let mut w = o.clone();
                w.push(a);
                matching_distribution(&w, &widened_cands, tau).unwrap()
            })
            .collect();
        let moved = contrastive_loss(&targets, &shifted, &targets, &shifted).unwrap().total;
        prop_assert!((moved - base).abs() <= 1e-9 * (1.0 + base.abs()), "{} vs {}", moved, base);
    }

    #[test]
    fn prune_keeps_shape_and_never_grows_a_patch(seed in 0u64..1000, p in 1usize..12, d in 1usize..8, spread in 0.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sequence = gaussian(&mut rng, p + 1, d);
        let logits = (0..p).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect();
        let out = prune(&sequence, &AttentionMask::from_logits(logits)).unwrap();
        prop_assert_eq!(out.shape(), sequence.shape());
        prop_assert_eq!(out.row(0), sequence.row(0));
        for r in 1..=p {
            prop_assert!(l2_norm(out.row(r)) <= l2_norm(sequence.row(r)));
        }
    }

    #[test]
    fn reliabilities_are_bounded_and_permutation_equivariant(
        seed in 0u64..1000,
        n in 3usize..40,
        k in 1usize..6,
        values in 1usize..5,
        epoch in 0usize..4,
    ) {
        prop_assume!(k < n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = gaussian(&mut rng, n, 4);
        let labels: Vec<Vec<usize>> = (0..n).map(|_| vec![rng.gen_range(0..values)]).collect();
        let preds: Vec<Vec<usize>> = (0..n).map(|_| vec![rng.gen_range(0..values)]).collect();
        let table = reliability_table(&features, &labels, Some(&preds), k, epoch, 2).unwrap();
        for r in &table.rows {
            prop_assert!((0.0..=1.0).contains(&r.s_v));
            prop_assert!(r.s_p.map_or(true, |s| (0.0..=1.0).contains(&s)));
            prop_assert!((0.0..=1.0).contains(&r.s));
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let permuted = reliability_table(
            &features.select_rows(&order),
            &order.iter().map(|&i| labels[i].clone()).collect::<Vec<_>>(),
            Some(&order.iter().map(|&i| preds[i].clone()).collect::<Vec<_>>()),
            k,
            epoch,
            2,
        )
        .unwrap();
        for (pos, &i) in order.iter().enumerate() {
            prop_assert_eq!(permuted.rows[pos], table.rows[i]);
        }
    }

    #[test]
    fn queue_fill_is_min_of_arrivals_and_capacity(steps in 0usize..12, b in 1usize..6, m in 0usize..30, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut queue = MomentumQueue::new(m, 3);
        for _ in 0..steps {
            let batch: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, 3)).collect();
            queue.enqueue(&batch).unwrap();
        }
        prop_assert_eq!(queue.len(), (steps * b).min(m));
    }

    #[test]
    fn multiple_match_is_monotone(
        gold in prop::collection::btree_set(0usize..10, 1..4),
        pred in prop::collection::btree_set(0usize..10, 0..5),
        extra in prop::collection::btree_set(0usize..10, 0..5),
    ) {
        let gold: Vec<usize> = gold.into_iter().collect();
        let base: Vec<usize> = pred.iter().copied().collect();
        let grown: Vec<usize> = pred.union(&extra).copied().collect();
        if match_prediction(&base, &gold, ValueType::Multiple) {
            prop_assert!(match_prediction(&grown, &gold, ValueType::Multiple));
        }
    }

    #[test]
    fn report_round_trips(seed in 0u64..1000, n in 1usize..60, multiple in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vt = if multiple { ValueType::Multiple } else { ValueType::Single };
        let records: Vec<EvalRecord> = (0..n)
            .map(|i| {
                let mut gold = vec![rng.gen_range(0..5)];
                let mut predicted: Vec<usize> = (0..rng.gen_range(0..3)).map(|_| rng.gen_range(0..5)).collect();
                if multiple {
                    gold.push(rng.gen_range(0..5));
                }
                gold.sort_unstable();
                gold.dedup();
                predicted.sort_unstable();
                predicted.dedup();
                let source = if rng.gen_bool(0.5) { GoldSource::Text } else { GoldSource::Image };
                EvalRecord { id: format!("r{i}"), predicted, gold, value_type: vt, gold_source: Some(source), category_id: 0 }
            })
            .collect();
        let report = source_aware_report(&records).unwrap();
        prop_assert_eq!(SourceAwareReport::from_json(&report.to_json().unwrap()).unwrap(), report.clone());
        let rows = report.rows(None);
        prop_assert_eq!(parse_csv(&rows_to_csv(&rows)).unwrap(), rows);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn dataset_save_load_is_identity(seed in 0u64..1000, multiple in any::<bool>()) {
        let value_type = if multiple { ValueType::Multiple } else { ValueType::Single };
        let ds = generate_dataset(&DatasetConfig { n_samples: 60, seed, value_type, ..DatasetConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        save_dataset(&ds.header, &ds.train, &path).unwrap();
        let (header, samples) = load_dataset(&path).unwrap();
        prop_assert_eq!(header, ds.header.clone());
        prop_assert_eq!(samples, ds.train.clone());
        prop_assert_eq!(generate_dataset(&DatasetConfig { n_samples: 60, seed, value_type, ..DatasetConfig::default() }).unwrap(), ds);
    }

    #[test]
    fn source_and_noise_bookkeeping(seed in 0u64..1000, multiple in any::<bool>(), noise in 0.0f64..0.5) {
        let value_type = if multiple { ValueType::Multiple } else { ValueType::Single };
        let cfg = DatasetConfig { n_samples: 120, seed, value_type, label_noise_rate: noise, ..DatasetConfig::default() };
        let ds = generate_dataset(&cfg).unwrap();
        for s in &ds.test {
            let gold = s.gold_label.as_ref().unwrap();
            let mentioned: Vec<usize> = s.tokens.iter().filter_map(|&t| ds.vocab.token_value(t)).collect();
            match s.gold_source.unwrap() {
                GoldSource::Text => prop_assert!(gold.iter().all(|g| mentioned.contains(g)), "{}", s.id),
                GoldSource::Image => prop_assert!(!gold.iter().any(|g| mentioned.contains(g)), "{}", s.id),
            }
            prop_assert_eq!(s.noise_flag, &s.weak_label != gold);
        }
    }
}

#[test]
fn teacher_forced_loss_falls_under_gradient_descent() {
    let ds = small_dataset(10, 4, 0.0);
    let config = TrainConfig { d_h: 8, batch_size: 10, queue_size: 10, toggles: Toggles::none(), ..TrainConfig::default() };
    let mut state = initial_state(&ds.header, &ds.vocab, &config).unwrap();
    let batch: Vec<&Sample> = ds.train.iter().collect();
    let weights = vec![1.0; batch.len()];
    let initial = total_loss(&state, &batch, &weights, &config).unwrap().rmlm;
    for _ in 0..50 {
        let (_, grads) = loss_and_gradients(&state, &batch, &weights, None, &config).unwrap();
        descend(&mut state, &grads, 0.05);
    }
    let last = total_loss(&state, &batch, &weights, &config).unwrap().rmlm;
    assert!(last < initial, "{last} >= {initial}");
}

#[test]
fn small_gradient_step_lowers_the_full_objective() {
    let ds = small_dataset(8, 6, 0.0);
    let config = TrainConfig { d_h: 8, batch_size: 4, queue_size: 8, ..TrainConfig::default() };
    let mut state = initial_state(&ds.header, &ds.vocab, &config).unwrap();
    let batch: Vec<&Sample> = ds.train.iter().take(4).collect();
    let weights = vec![0.25, 0.5, 0.75, 1.0];
    let momentum = momentum_batch(&state, &batch).unwrap();
    let (before, grads) = loss_and_gradients(&state, &batch, &weights, Some(&momentum), &config).unwrap();
    descend(&mut state, &grads, 1e-6);
    let after = total_loss(&state, &batch, &weights, &config).unwrap();
    assert!(after.total < before.total, "{} >= {}", after.total, before.total);
}

#[test]
fn zeroing_patches_changes_some_image_sourced_prediction() {
    let ds = small_dataset(40, 8, 0.5);
    assert_eq!(ds.train.len(), 20);
    let config = TrainConfig { epochs: 3, d_h: 16, batch_size: 4, queue_size: 16, k: 3, learning_rate: 3e-3, ..TrainConfig::default() };
    let model = train(&ds.train, &ds.header, &ds.vocab, &config).unwrap().state.model;
    let image_sourced: Vec<&Sample> = ds.test.iter().filter(|s| s.gold_source == Some(GoldSource::Image)).collect();
    assert!(!image_sourced.is_empty());
    let changed = image_sourced.iter().any(|s| {
        let blank = Sample { patches: Matrix::zeros(s.patches.rows(), s.patches.cols()), ..(*s).clone() };
        predict(&model, s).unwrap().values != predict(&model, &blank).unwrap().values
    });
    assert!(changed);
}
