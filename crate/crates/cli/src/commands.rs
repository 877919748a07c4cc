use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vtx_core::data::{generate_dataset, load_dataset, load_vocabulary, save_dataset, save_vocabulary, GoldSource, Sample, Vocabulary};
use vtx_core::evaluation::{
    evaluate_samples, macro_prf, retrieval_for_samples, rows_to_csv, source_aware_report, Prf, SourceAwareReport,
};
use vtx_core::model::{dataset_header_for, load_checkpoint, patch_mask, save_checkpoint, ModelState};
use vtx_core::training::{train, weights_csv, Toggles};

use crate::config::{hex, RunConfig};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

pub fn generate(config: &RunConfig, out: &Path) -> Result<()> {
    config.dataset.validate()?;
    let ds = generate_dataset(&config.dataset)?;
    create_dir(out)?;
    save_dataset(&ds.header, &ds.train, &out.join(TRAIN_FILE))?;
    save_dataset(&ds.header, &ds.test, &out.join(TEST_FILE))?;
    save_vocabulary(&ds.vocab, &out.join(VOCAB_FILE))?;
    write(&out.join(CONFIG_FILE), config.to_text())?;

    let noisy = ds.train.iter().filter(|s| s.noise_flag).count();
    let image = |xs: &[Sample]| xs.iter().filter(|s| s.gold_source == Some(GoldSource::Image)).count();
    println!("train: {} samples ({noisy} noisy)", ds.train.len());
    println!("test: {} samples ({} TEXT, {} IMAGE)", ds.test.len(), ds.test.len() - image(&ds.test), image(&ds.test));
    println!("wrote {}", out.display());
    Ok(())
}

fn data_dir(config: &RunConfig) -> Result<&Path> {
    match &config.data {
        Some(dir) => Ok(dir),
        None => bail!("no dataset directory: pass --data or set `data` in the config"),
    }
}

fn load_split(dir: &Path, file: &str) -> Result<Vec<Sample>> {
    let path = dir.join(file);
    ensure!(path.exists(), "dataset file {} does not exist", path.display());
    let (_, samples) = load_dataset(&path)?;
    Ok(samples)
}

/// SHA-256 over the dataset files, in a fixed order.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for file in [TRAIN_FILE, TEST_FILE, VOCAB_FILE] {
        let path = dir.join(file);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        hasher.update(file.as_bytes());
        hasher.update(bytes);
    }
    Ok(hex(&hasher.finalize()))
}

pub fn train_run(config: &RunConfig, out: &Path, dump_weights: bool) -> Result<ModelState> {
    config.train.validate()?;
    let data = data_dir(config)?;
    let train_path = data.join(TRAIN_FILE);
    ensure!(train_path.exists(), "dataset file {} does not exist", train_path.display());
    let (header, samples) = load_dataset(&train_path)?;
    ensure!(!samples.is_empty(), "{} holds no samples", train_path.display());
    let vocab = load_vocabulary(&data.join(VOCAB_FILE))?;

    let outcome = train(&samples, &header, &vocab, &config.train)?;
    let dir = out.join(config.run_name());
    create_dir(&dir)?;
    write(&dir.join(CONFIG_FILE), config.to_text())?;
    write(&dir.join("metrics.csv"), outcome.metrics.to_csv())?;
    write(&dir.join("weights.csv"), weights_csv(&samples, &outcome.weights))?;
    save_checkpoint(&outcome.state, &dir.join(CHECKPOINT_FILE))?;
    if dump_weights {
        let weights_dir = dir.join("weights");
        create_dir(&weights_dir)?;
        for table in &outcome.weights {
            write(&weights_dir.join(format!("epoch-{}.json", table.epoch)), serde_json::to_string_pretty(table)?)?;
        }
    }

    if let Some(last) = outcome.metrics.steps.last() {
        let l = last.losses;
        println!(
            "{} steps in {:.1}s; last loss total {:.4} (sc {:.4}, ct {:.4}, rmlm {:.4})",
            outcome.metrics.steps.len(),
            outcome.metrics.wall_clock_secs,
            l.total,
            l.sc,
            l.ct,
            l.rmlm
        );
    } else {
        println!("0 steps; checkpoint holds the initialization");
    }
    println!("run dir: {}", dir.display());
    Ok(outcome.state)
}

#[derive(Debug, Clone, Default)]
pub struct EvalFlags {
    pub source_aware: bool,
    pub retrieval: bool,
    pub dump_masks: bool,
    pub pairs: Option<usize>,
}

#[derive(Serialize)]
struct MaskRecord<'a> {
    id: &'a str,
    gates: Vec<f64>,
    foreground: &'a [usize],
}

fn vocab_next_to(test: &Path) -> Option<Vocabulary> {
    let path = test.parent()?.join(VOCAB_FILE);
    path.exists().then(|| load_vocabulary(&path).ok()).flatten()
}

/// Report for `samples` under `state`, with or without source splits.
pub fn report_for(state: &ModelState, samples: &[Sample], source_aware: bool) -> Result<SourceAwareReport> {
    let records = evaluate_samples(&state.model, samples)?;
    Ok(if source_aware {
        source_aware_report(&records)?
    } else {
        SourceAwareReport { overall: macro_prf(&records)?, text: None, image: None, gap: None }
    })
}

pub fn evaluate(checkpoint: &Path, test: &Path, vocab: Option<&Path>, out: &Path, flags: &EvalFlags) -> Result<SourceAwareReport> {
    ensure!(checkpoint.exists(), "checkpoint {} does not exist", checkpoint.display());
    ensure!(test.exists(), "test set {} does not exist", test.display());
    let state = load_checkpoint(checkpoint)?;
    let (header, samples) = load_dataset(test)?;
    ensure!(!samples.is_empty(), "test set {} is empty", test.display());
    let expected = dataset_header_for(&state.model.dims, state.model.value_type);
    ensure!(
        header == expected,
        "checkpoint was trained for dataset header {expected:?} but {} has {header:?}",
        test.display()
    );
    let vocab = match vocab {
        Some(p) => Some(load_vocabulary(p)?),
        None => vocab_next_to(test),
    };

    create_dir(out)?;
    let report = report_for(&state, &samples, flags.source_aware)?;
    write(&out.join("report.json"), report.to_json()?)?;
    write(&out.join("report.csv"), rows_to_csv(&report.rows(vocab.as_ref())))?;
    let m = report.overall.macro_avg;
    println!("macro P {:.4} R {:.4} F1 {:.4} over {} records", m.precision, m.recall, m.f1, samples.len());
    if flags.source_aware {
        for (name, split) in [("TEXT", &report.text), ("IMAGE", &report.image)] {
            match split {
                Some(r) => println!("{name}: F1 {:.4} ({} records)", r.macro_avg.f1, r.n_records),
                None => println!("{name}: absent"),
            }
        }
        match report.gap {
            Some(g) => println!("GAP: P {:.4} R {:.4} F1 {:.4}", g.precision, g.recall, g.f1),
            None => println!("GAP: omitted (single-source test set)"),
        }
    }

    if flags.retrieval {
        let n = flags.pairs.unwrap_or(samples.len()).min(samples.len());
        let metrics = retrieval_for_samples(&state.model, &samples[..n])?;
        write(&out.join("retrieval.json"), serde_json::to_string_pretty(&metrics)?)?;
        println!(
            "retrieval over {n} pairs: T@1 {:.4} I@1 {:.4} T@M {:.2} I@M {:.2} R@Mean {:.2}",
            metrics.t_at_1, metrics.i_at_1, metrics.t_at_m, metrics.i_at_m, metrics.r_at_mean
        );
    }

    if flags.dump_masks {
        ensure!(state.model.pruning, "--dump-masks needs a checkpoint trained with pruning on");
        let mut lines = String::new();
        for s in &samples {
            let mask = patch_mask(&state.model, s)?;
            lines.push_str(&serde_json::to_string(&MaskRecord { id: &s.id, gates: mask.gates, foreground: &s.foreground })?);
            lines.push('\n');
        }
        write(&out.join("masks.jsonl"), lines)?;
    }
    println!("wrote {}", out.display());
    Ok(report)
}

pub const VARIANTS: [(&str, Toggles); 4] = [
    ("full", Toggles { s1: true, s2: true, s3: true }),
    ("w/o S1", Toggles { s1: false, s2: true, s3: true }),
    ("w/o S2", Toggles { s1: true, s2: false, s3: true }),
    ("w/o S3", Toggles { s1: true, s2: true, s3: false }),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Seed as text, or `mean`.
    pub seed: String,
    pub variant: String,
    pub macro_avg: Prf,
    pub gap_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub mean: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,variant,P,R,F1,GAP_F1\n");
        for r in self.rows.iter().chain(&self.mean) {
            let gap = r.gap_f1.map_or_else(String::new, |g| g.to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.seed, r.variant, r.macro_avg.precision, r.macro_avg.recall, r.macro_avg.f1, gap
            ));
        }
        out
    }
}

fn variant_config(base: &RunConfig, seed: u64, toggles: Toggles) -> RunConfig {
    let mut config = base.clone();
    config.train.seed = seed;
    config.train.toggles = toggles;
    config
}

fn spawn_train(config: &RunConfig, out: &Path) -> Result<std::process::Child> {
    let variant_dir = out.join("variants");
    create_dir(&variant_dir)?;
    let variant_file = variant_dir.join(format!("{}.txt", config.run_name()));
    write(&variant_file, config.to_text())?;
    let exe = std::env::current_exe().context("locating the vtx executable")?;
    Command::new(exe)
        .arg("train")
        .arg("--config")
        .arg(&variant_file)
        .arg("--out")
        .arg(out)
        .stdout(std::process::Stdio::null())
        .spawn()
        .context("spawning a training process")
}

pub fn ablate(base: &RunConfig, seeds: &[u64], out: &Path, parallel: bool) -> Result<AblationReport> {
    ensure!(!seeds.is_empty(), "ablation needs at least one seed");
    let data = data_dir(base)?.to_path_buf();
    let test = load_split(&data, TEST_FILE)?;
    ensure!(!test.is_empty(), "test split is empty");
    let hash = dataset_hash(&data)?;
    println!("dataset {} sha256 {hash}", data.display());
    create_dir(out)?;

    let configs: Vec<(u64, &str, RunConfig)> = seeds
        .iter()
        .flat_map(|&seed| VARIANTS.iter().map(move |(name, t)| (seed, *name, variant_config(base, seed, *t))))
        .collect();
    for (_, _, c) in &configs {
        c.validate()?;
    }

    if parallel {
        let children = configs.iter().map(|(_, _, c)| spawn_train(c, out)).collect::<Result<Vec<_>>>()?;
        for (mut child, (seed, name, _)) in children.into_iter().zip(&configs) {
            let status = child.wait()?;
            ensure!(status.success(), "training {name} (seed {seed}) failed with {status}");
        }
    }

    let mut rows = Vec::new();
    for (seed, name, config) in &configs {
        let state = if parallel {
            load_checkpoint(&out.join(config.run_name()).join(CHECKPOINT_FILE))?
        } else {
            println!("training {name} (seed {seed})");
            train_run(config, out, false)?
        };
        let report = report_for(&state, &test, true)?;
        rows.push(AblationRow {
            seed: seed.to_string(),
            variant: name.to_string(),
            macro_avg: report.overall.macro_avg,
            gap_f1: report.gap.map(|g| g.f1),
        });
    }

    let mean = VARIANTS
        .iter()
        .map(|(name, _)| {
            let picked: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == *name).collect();
            let n = picked.len() as f64;
            let avg = |f: &dyn Fn(&AblationRow) -> f64| picked.iter().map(|r| f(r)).sum::<f64>() / n;
            let gaps: Option<Vec<f64>> = picked.iter().map(|r| r.gap_f1).collect();
            AblationRow {
                seed: "mean".into(),
                variant: name.to_string(),
                macro_avg: Prf {
                    precision: avg(&|r| r.macro_avg.precision),
                    recall: avg(&|r| r.macro_avg.recall),
                    f1: avg(&|r| r.macro_avg.f1),
                },
                gap_f1: gaps.map(|g| g.iter().sum::<f64>() / n),
            }
        })
        .collect();

    let report = AblationReport { dataset_hash: hash, seeds: seeds.to_vec(), rows, mean };
    write(&out.join("ablation.csv"), report.to_csv())?;
    write(&out.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    println!("{:<8} {:>8} {:>8} {:>8} {:>8}", "variant", "P", "R", "F1", "GAP_F1");
    for r in &report.mean {
        let gap = r.gap_f1.map_or_else(|| "-".to_string(), |g| format!("{g:.4}"));
        println!("{:<8} {:>8.4} {:>8.4} {:>8.4} {:>8}", r.variant, r.macro_avg.precision, r.macro_avg.recall, r.macro_avg.f1, gap);
    }
    println!("wrote {}", out.display());
    Ok(report)
}

fn find_reports(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            find_reports(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == "report.json") {
            found.push(path);
        }
    }
    Ok(())
}

/// Collects every `report.json` under `input` into one macro-level summary table.
pub fn summarize(input: &Path, out: &Path) -> Result<usize> {
    ensure!(input.is_dir(), "{} is not a directory", input.display());
    let mut reports = Vec::new();
    find_reports(input, &mut reports)?;
    ensure!(!reports.is_empty(), "no report.json found under {}", input.display());

    let mut csv = String::from("report,split,P,R,F1\n");
    for path in &reports {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let report = SourceAwareReport::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
        let name = path.parent().unwrap_or(input).strip_prefix(input).unwrap_or(Path::new("")).display().to_string();
        let name = if name.is_empty() { ".".to_string() } else { name };
        let mut splits = vec![("ALL", Some(report.overall.macro_avg))];
        splits.push(("TEXT", report.text.as_ref().map(|r| r.macro_avg)));
        splits.push(("IMAGE", report.image.as_ref().map(|r| r.macro_avg)));
        splits.push(("GAP", report.gap));
        for (split, prf) in splits {
            if let Some(m) = prf {
                csv.push_str(&format!("{name},{split},{},{},{}\n", m.precision, m.recall, m.f1));
                println!("{name:<32} {split:<6} P {:.4} R {:.4} F1 {:.4}", m.precision, m.recall, m.f1);
            }
        }
    }
    create_dir(out)?;
    write(&out.join("summary.csv"), csv)?;
    println!("wrote {}", out.join("summary.csv").display());
    Ok(reports.len())
}
