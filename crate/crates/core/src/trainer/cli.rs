use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::datagen::{generate_dataset, load_dataset_dir, save_dataset_dir, GeneratorConfig};
use crate::error::{Error, Result};
use crate::model::{read_checkpoint, write_checkpoint};

use super::{
    evaluate, generator_config_from_str, init_model, read_train_log, render_eval_report,
    render_schedule_report, train, train_config_from_str, write_train_log, TrainConfig,
    DEFAULT_KS,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train.log";

#[derive(Debug, Parser)]
#[command(name = "sgght", about = "Head-to-tail curriculum training for long-tailed relation prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed dataset directory.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory; writes checkpoint.bin and train.log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
        ks: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render schedule traces and per-predicate recall from a training log.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Writes through a sibling temporary file so failures leave no partial output.
fn write_atomically(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_config(path: Option<&Path>) -> Result<Option<String>> {
    path.map(|p| fs::read_to_string(p).map_err(Error::from)).transpose()
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = match read_config(config.as_deref())? {
                Some(text) => generator_config_from_str(&text)?,
                None => GeneratorConfig::default(),
            };
            let ds = generate_dataset(&cfg)?;
            save_dataset_dir(&out, &ds)
        }
        Command::Train { config, data, out } => {
            let cfg = match read_config(config.as_deref())? {
                Some(text) => train_config_from_str(&text)?,
                None => TrainConfig::default(),
            };
            let ds = load_dataset_dir(&data)?;
            let model = init_model(&cfg, &ds)?;
            let (model, mut log) = train(&cfg, &ds, model)?;
            let final_iter = cfg.schedule.total;
            if !ds.test.is_empty() && log.evals.last().map(|e| e.0) != Some(final_iter) {
                log.evals
                    .push((final_iter, evaluate(&model, &ds.test, &ds.vocab, &DEFAULT_KS)?));
            }
            fs::create_dir_all(&out)?;
            write_checkpoint(&out.join(CHECKPOINT_FILE), &model)?;
            write_train_log(&out.join(LOG_FILE), &log, &ds.vocab)
        }
        Command::Eval {
            checkpoint,
            data,
            ks,
            out,
        } => {
            if ks.is_empty() || ks.contains(&0) {
                return Err(Error::invalid("--ks needs positive values"));
            }
            let model = read_checkpoint(&checkpoint)?;
            let ds = load_dataset_dir(&data)?;
            let report = evaluate(&model, &ds.test, &ds.vocab, &ks)?;
            write_atomically(&out, &render_eval_report(&report, &ds.vocab))
        }
        Command::Report { log, out } => {
            let parsed = read_train_log(&log)?;
            write_atomically(&out, &render_schedule_report(&parsed))
        }
    }
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit status: 0 on success, 2 for usage errors, 1 otherwise.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
