use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use mmphone::corpus::InputModality;
use mmphone_cli::{
    analyze, eval, exit_code, resolve_seed, synth_data, train, usage, AnalyzeMode, EvalOptions, ExperimentConfig, TrainOptions,
    SEED_ENV,
};

#[derive(Parser)]
#[command(name = "mmphone", version, about = "Multimodal phoneme recognition experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON). Flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for generation, initialization, shuffling and bootstrap.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired audio/video corpus.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a recognizer on one input modality.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        modality: InputModality,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run the hyperparameter grid first and train with the best cell.
        #[arg(long)]
        grid: bool,
        /// Select the checkpoint on test loss rather than a held-out dev split.
        #[arg(long)]
        select_on_test: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Decode the test split and write a PER report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Score the references against themselves (pipeline check).
        #[arg(long, hide = true)]
        oracle_hyps: bool,
    },
    /// Latent projections, attention profiles or cross-model attention difference.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Comma-separated checkpoint directories (audio,multimodal for diff).
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        mode: AnalyzeMode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn setup(common: &Common) -> Result<(ExperimentConfig, u64)> {
    let cfg = ExperimentConfig::load_or_default(common.config.as_deref())?;
    let env = std::env::var(SEED_ENV).ok();
    let seed = resolve_seed(common.seed, env.as_deref(), cfg.seed)?;
    Ok((cfg, seed))
}

fn pick(flag: Option<PathBuf>, file: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| file.clone())
        .ok_or_else(|| usage(format!("missing {what}: pass it as a flag or set it under \"paths\" in the config")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { common, out } => {
            let (cfg, seed) = setup(&common)?;
            let out = pick(out, &cfg.paths.corpus_dir, "--out")?;
            let s = synth_data(&cfg, seed, &out, common.force)?;
            println!(
                "{} chunks ({} train, {} test), {:.1} s total, written to {}",
                s.train_chunks + s.test_chunks,
                s.train_chunks,
                s.test_chunks,
                s.total_duration_s,
                out.display()
            );
        }
        Command::Train { common, corpus, modality, out, grid, select_on_test, quiet } => {
            let (cfg, seed) = setup(&common)?;
            let corpus = pick(corpus, &cfg.paths.corpus_dir, "--corpus")?;
            let out = pick(out, &cfg.paths.output_dir, "--out")?;
            let opts = TrainOptions { grid, select_on_test, force: common.force, verbose: !quiet };
            let s = train(&cfg, seed, &corpus, modality, &out, &opts)?;
            println!(
                "best epoch {} of {} (dev loss {:.4}); checkpoint at {}",
                s.best_epoch,
                s.epochs_run,
                s.best_dev_loss,
                s.checkpoint.display()
            );
        }
        Command::Eval { common, corpus, checkpoint, report, oracle_hyps } => {
            let (cfg, seed) = setup(&common)?;
            let corpus = pick(corpus, &cfg.paths.corpus_dir, "--corpus")?;
            let rep = eval(&cfg, seed, &corpus, &checkpoint, &report, &EvalOptions { oracle_hyps, force: common.force })?;
            println!("PER {:.4} over {} utterances; report at {}", rep.overall_per, rep.n_utterances, report.display());
        }
        Command::Analyze { common, corpus, checkpoints, mode, out } => {
            let (cfg, seed) = setup(&common)?;
            let corpus = pick(corpus, &cfg.paths.corpus_dir, "--corpus")?;
            let out = pick(out, &cfg.paths.output_dir, "--out")?;
            let s = analyze(&cfg, seed, &corpus, &checkpoints, mode, &out, common.force)?;
            for (tag, sil) in &s.silhouettes {
                match sil {
                    Some(v) => println!("{tag}: silhouette by manner {v:.3}"),
                    None => println!("{tag}: silhouette undefined (one class)"),
                }
            }
            for f in &s.files {
                println!("wrote {}", display(f));
            }
        }
    }
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
