//! Batch pipeline behind the `mmphone` binary: corpus synthesis, training,
//! evaluation and analysis. Each command reads and writes plain files so runs
//! can be chained from the shell or from tests.

pub mod analyze;
pub mod config;
pub mod svg;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mmphone::corpus::{read_corpus, write_corpus, Corpus, InputModality, CORPUS_MANIFEST};
use mmphone::ctc::{greedy_decode, LabelSequence};
use mmphone::metrics::{PerReport, ReportOptions};
use mmphone::model::{Checkpoint, Mode, Model, ModelConfig};
use mmphone::training::{grid_csv, grid_search, log_csv, prepare_examples, split_dev, train_with, Example, TrainConfig};

pub use analyze::{analyze, AnalyzeMode, AnalyzeSummary};
pub use config::{resolve_seed, ExperimentConfig, SEED_ENV};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Invalid invocation: wrong flag combination, refusal to overwrite, etc.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Process exit code for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<mmphone::Error>() {
            return match e {
                mmphone::Error::Divergence { .. } | mmphone::Error::Numeric(_) => EXIT_NUMERIC,
                mmphone::Error::Io(_) | mmphone::Error::Json(_) | mmphone::Error::Format(_) => EXIT_IO,
                _ => EXIT_USAGE,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_IO;
        }
    }
    1
}

/// Prepares `dir` for output: created if missing, refused if non-empty
/// unless `force`, in which case only `owned` entries are removed.
fn prepare_out_dir(dir: &Path, force: bool, owned: &[&str]) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(usage(format!("{} exists and is not empty; pass --force to overwrite", dir.display())));
        }
        for name in owned {
            let p = dir.join(name);
            if p.is_dir() {
                fs::remove_dir_all(&p).with_context(|| format!("removing {}", p.display()))?;
            } else if p.is_file() {
                fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    if !dir.join(CORPUS_MANIFEST).is_file() {
        return Err(usage(format!("{} is not a corpus directory (no {CORPUS_MANIFEST})", dir.display())));
    }
    read_corpus(dir).with_context(|| format!("reading corpus {}", dir.display()))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    if !dir.is_dir() {
        return Err(usage(format!("checkpoint {} does not exist", dir.display())));
    }
    Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

/// Modality recorded in a checkpoint.
pub fn checkpoint_modality(ckpt: &Checkpoint) -> Result<InputModality> {
    let name = ckpt.modality.as_deref().ok_or_else(|| usage("checkpoint does not record its input modality"))?;
    Ok(name.parse()?)
}

/// Errors unless the checkpoint was trained on this corpus's phoneme set.
pub fn check_vocabulary(ckpt: &Checkpoint, corpus: &Corpus) -> Result<()> {
    let symbols = corpus.inventory.symbols();
    if ckpt.symbols != symbols || ckpt.model.config.vocab_size != corpus.inventory.num_classes() {
        return Err(mmphone::Error::Config(format!(
            "checkpoint vocabulary {:?} does not match corpus inventory {:?}",
            ckpt.symbols, symbols
        ))
        .into());
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SynthSummary {
    pub train_chunks: usize,
    pub test_chunks: usize,
    pub total_duration_s: f64,
}

pub fn synth_data(cfg: &ExperimentConfig, seed: u64, out: &Path, force: bool) -> Result<SynthSummary> {
    cfg.generator.validate()?;
    prepare_out_dir(out, force, &[CORPUS_MANIFEST, "features", "alignments"])?;
    let corpus = Corpus::synthetic(&cfg.generator, seed)?;
    write_corpus(&corpus, out).with_context(|| format!("writing corpus to {}", out.display()))?;
    Ok(SynthSummary {
        train_chunks: corpus.train.len(),
        test_chunks: corpus.test.len(),
        total_duration_s: corpus.total_duration(),
    })
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Run the hyperparameter grid first and train with its best cell.
    pub grid: bool,
    /// Select the checkpoint on test-split loss instead of a held-out dev split.
    pub select_on_test: bool,
    pub force: bool,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub epochs_run: usize,
    pub checkpoint: PathBuf,
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "training_log.csv";
pub const GRID_LOG: &str = "grid.csv";

/// Model config with the input width and vocabulary taken from the data.
pub fn model_config_for(cfg: &ExperimentConfig, corpus: &Corpus, modality: InputModality) -> Result<ModelConfig> {
    let first = corpus
        .train
        .first()
        .ok_or_else(|| usage("corpus has no training chunks"))?;
    Ok(ModelConfig {
        input_dim: first.input_width(modality),
        vocab_size: corpus.inventory.num_classes(),
        ..cfg.model.clone()
    })
}

pub fn train(
    cfg: &ExperimentConfig,
    seed: u64,
    corpus_dir: &Path,
    modality: InputModality,
    out: &Path,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    let corpus = load_corpus(corpus_dir)?;
    prepare_out_dir(out, opts.force, &[CHECKPOINT_DIR, TRAIN_LOG, GRID_LOG])?;
    let model_config = model_config_for(cfg, &corpus, modality)?;
    model_config.validate()?;
    let examples = prepare_examples(&corpus.train, modality)?;
    let (fit, dev) = if opts.select_on_test {
        (examples, prepare_examples(&corpus.test, modality)?)
    } else {
        split_dev(examples, cfg.dev_fraction, seed)?
    };
    let mut train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    if opts.grid {
        let cells = grid_search(&model_config, seed, &fit, &dev, &train_cfg)?;
        write(&out.join(GRID_LOG), &grid_csv(&cells))?;
        let best = cells
            .iter()
            .find(|c| c.best_dev_loss.is_some())
            .ok_or_else(|| mmphone::Error::Numeric("every grid cell diverged".into()))?;
        train_cfg.learning_rate = best.lr;
        train_cfg.batch_size = best.batch;
        train_cfg.weight_decay = best.wd;
    }
    let model = Model::new(model_config, seed)?;
    let outcome = train_with(model, &fit, &dev, &train_cfg, |e| {
        if opts.verbose {
            eprintln!("epoch {:>3}  lr {:.2e}  train {:.4}  dev {:.4}", e.epoch, e.lr, e.train_loss, e.dev_loss);
        }
    })?;
    write(&out.join(TRAIN_LOG), &log_csv(&outcome.log))?;
    let checkpoint = out.join(CHECKPOINT_DIR);
    Checkpoint {
        model: outcome.best.clone(),
        seed,
        epoch: outcome.best_epoch,
        modality: Some(modality.name().to_string()),
        symbols: corpus.inventory.symbols(),
    }
    .save(&checkpoint)
    .with_context(|| format!("saving checkpoint to {}", checkpoint.display()))?;
    Ok(TrainSummary {
        best_epoch: outcome.best_epoch,
        best_dev_loss: outcome.best_dev_loss,
        epochs_run: outcome.epochs_run(),
        checkpoint,
    })
}

/// Greedy transcriptions of `examples`.
pub fn decode(model: &Model, examples: &[Example]) -> Result<Vec<LabelSequence>> {
    examples
        .iter()
        .map(|e| Ok(greedy_decode(&model.forward(&e.id, &e.frames, Mode::Eval, Default::default())?.log_probs)))
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Replace hypotheses with the references (pipeline self-check).
    pub oracle_hyps: bool,
    pub force: bool,
}

pub fn eval(
    cfg: &ExperimentConfig,
    seed: u64,
    corpus_dir: &Path,
    checkpoint: &Path,
    report: &Path,
    opts: &EvalOptions,
) -> Result<PerReport> {
    if report.exists() && !opts.force {
        return Err(usage(format!("{} exists; pass --force to overwrite", report.display())));
    }
    let corpus = load_corpus(corpus_dir)?;
    let ckpt = load_checkpoint(checkpoint)?;
    check_vocabulary(&ckpt, &corpus)?;
    let modality = checkpoint_modality(&ckpt)?;
    let examples = prepare_examples(&corpus.test, modality)?;
    let refs: Vec<LabelSequence> = examples.iter().map(|e| e.labels.clone()).collect();
    let hyps = if opts.oracle_hyps { refs.clone() } else { decode(&ckpt.model, &examples)? };
    let rep = PerReport::build(
        &refs,
        &hyps,
        &corpus.inventory,
        ReportOptions {
            iterations: cfg.eval.bootstrap_iterations,
            seed,
            level: cfg.eval.level,
            attribution: cfg.eval.attribution.into(),
        },
    )?;
    write(report, &rep.to_csv())?;
    Ok(rep)
}

