use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use slu_core::data::{
    generate_corpus, read_dataset, split_corpus, write_dataset, CorpusSpec, Utterance,
};
use slu_core::harness::{
    evaluate, evaluate_reference_text, grad_check_suite, load_splits, parse_toml_with_overrides,
    run, thread_pool, Checkpoint, Pipeline, RunConfig, SUITE_EPS, SUITE_RTOL,
};
use slu_core::Result;

#[derive(Parser)]
#[command(
    name = "slu",
    version,
    about = "Joint ASR and NLU training on synthetic speech"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override with a dotted key, e.g. `optimizer.learning_rate=0.01`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut cfg = RunConfig::from_toml(&text, &self.overrides)?;
        cfg.apply_env()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Dev,
    Test,
}

#[derive(clap::Args)]
struct DataArgs {
    /// Dataset file; defaults to a split of the configured data.
    #[arg(long, conflicts_with = "split")]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
}

impl DataArgs {
    fn load(&self, cfg: &RunConfig) -> Result<Vec<Utterance>> {
        if let Some(p) = &self.dataset {
            return read_dataset(p);
        }
        let s = load_splits(cfg)?;
        Ok(match self.split {
            Split::Train => s.train,
            Split::Dev => s.dev,
            Split::Test => s.test,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write train/dev/test dataset files for a corpus spec.
    GenerateData {
        /// Corpus spec (TOML); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write report, checkpoint and config to the output directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Decode a dataset with a checkpoint and print the metric report.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Feed reference transcripts to the NLU instead of ASR output.
        #[arg(long)]
        reference_text: bool,
    },
    /// Print one JSON line per utterance with the decoded annotation.
    Decode {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Finite-difference checks of every loss through every interface.
    GradCheck {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn corpus_spec(path: Option<&Path>, overrides: &[String]) -> Result<CorpusSpec> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    parse_toml_with_overrides(&text, overrides)
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenerateData {
            spec,
            overrides,
            out,
        } => {
            let spec = corpus_spec(spec.as_deref(), &overrides)?;
            let splits = split_corpus(generate_corpus(&spec)?);
            std::fs::create_dir_all(&out)?;
            for (name, utts) in [
                ("train", &splits.train),
                ("dev", &splits.dev),
                ("test", &splits.test),
            ] {
                let path = out.join(format!("{name}.jsonl"));
                write_dataset(&path, utts)?;
                println!("{}\t{}", path.display(), utts.len());
            }
        }
        Command::Train { config } => {
            let cfg = config.load()?;
            let out = run(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&out.report)?);
        }
        Command::Evaluate {
            config,
            checkpoint,
            data,
            reference_text,
        } => {
            let cfg = config.load()?;
            let p = Pipeline::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let utts = data.load(&cfg)?;
            let pool = thread_pool(cfg.threads)?;
            let report = if reference_text {
                evaluate_reference_text(&p, &utts, &pool)?
            } else {
                evaluate(&p, &utts, cfg.beam_width, &pool)?
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Decode {
            config,
            checkpoint,
            data,
        } => {
            let cfg = config.load()?;
            let p = Pipeline::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            for u in data.load(&cfg)? {
                println!("{}", serde_json::to_string(&p.decode(&u, cfg.beam_width)?)?);
            }
        }
        Command::GradCheck { config } => {
            let cfg = config.load()?;
            let rows = grad_check_suite(cfg.seed)?;
            println!("eps {SUITE_EPS:e}  rtol {SUITE_RTOL:e}");
            println!(
                "{:<36} {:>6} {:>12}  result",
                "objective", "coords", "max rel err"
            );
            for r in &rows {
                let verdict = if r.passed { "pass" } else { "FAIL" };
                println!(
                    "{:<36} {:>6} {:>12.3e}  {verdict}",
                    r.name, r.coords, r.max_rel_error
                );
            }
            return Ok(rows.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
