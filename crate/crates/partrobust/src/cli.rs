//! Command-line front end: binds run configs to the pipeline.
//!
//! `partrobust <command> --config <path> [--set k=v ...] [--out <dir>]`
//!
//! Exit status: 0 success, 2 configuration error, 3 runtime numeric
//! failure, 1 anything else. Every artifact-producing command writes
//! `resolved_config.json` and `run.log` into the output directory; partial
//! outputs go to a `.tmp` name and are renamed only on success.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::datagen::{export_dataset, generate_dataset, transform_labels, Dataset};
use crate::error::{Error, Result};
use crate::evalreport::{
    benchmark_eval, evaluate, outcomes_jsonl, parse_tradeoff_csv, tradeoff_csv, tradeoff_report,
};
use crate::trainer::{history_jsonl, sweep, sweep_rows_jsonl, train, Checkpoint, SweepRow};

#[derive(Debug, Parser)]
#[command(
    name = "partrobust",
    about = "Part-based robust classifiers: data generation, adversarial training, attacks, evaluation, sweeps, reports"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct CommonArgs {
    /// Path to the JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path overrides applied after file parsing, e.g.
    /// --set train.lr0=0.05 --set model.head=bbox
    #[arg(long = "set")]
    set: Vec<String>,
    /// Output directory (overrides the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the procedural dataset and export it.
    GenData(CommonArgs),
    /// Train a model per the config; writes checkpoint and history.
    Train(CommonArgs),
    /// Attack a trained checkpoint and log feasibility and outcomes.
    Attack(CommonArgs),
    /// Evaluate a trained checkpoint (attacks and optional benchmarks).
    Eval(CommonArgs),
    /// Train every cell of the configured hyperparameter grid.
    Sweep(CommonArgs),
    /// Build the accuracy-robustness trade-off report from sweep results.
    Report(CommonArgs),
}

/// Maps an error onto the documented exit status.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Data(_) => 2,
        Error::Numeric(_) | Error::NonFiniteLoss { .. } => 3,
        _ => 1,
    }
}

/// Parses argv and runs; returns the process exit code.
pub fn main_entry<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct RunContext {
    config: RunConfig,
    out_dir: PathBuf,
    log: fs::File,
}

impl RunContext {
    /// Validates the config before touching the filesystem: an invalid
    /// config must leave no artifacts behind.
    fn new(args: &CommonArgs) -> Result<Self> {
        let config = RunConfig::load(&args.config, &args.set)?;
        let out_dir = args
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(&config.output_dir));
        if out_dir.as_os_str().is_empty() {
            return Err(Error::config("no output directory: set output_dir or --out"));
        }
        fs::create_dir_all(&out_dir)?;
        write_atomic(
            &out_dir.join("resolved_config.json"),
            config.to_pretty_json().as_bytes(),
        )?;
        let log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out_dir.join("run.log"))?;
        Ok(RunContext {
            config,
            out_dir,
            log,
        })
    }

    fn log(&mut self, msg: &str) {
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let _ = writeln!(self.log, "[{ts}] {msg}");
    }

    fn dataset(&mut self) -> Result<Dataset> {
        let resolved = self.config.resolve();
        self.log("generating dataset");
        let mut data = generate_dataset(&resolved.dataset)?;
        if let Some(mode) = self.config.labels.label_mode()? {
            self.log("applying label transform");
            data = transform_labels(&data, mode, resolved.dataset.seed)?;
        }
        Ok(data)
    }

    fn checkpoint_path(&self) -> PathBuf {
        match &self.config.eval.checkpoint {
            Some(p) => PathBuf::from(p),
            None => self.out_dir.join("checkpoint.ckpt"),
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => {
            let mut ctx = RunContext::new(&args)?;
            let data = ctx.dataset()?;
            let target = ctx.out_dir.join("dataset");
            let tmp = ctx.out_dir.join("dataset.tmp");
            if tmp.exists() {
                fs::remove_dir_all(&tmp)?;
            }
            export_dataset(&data, &tmp)?;
            if target.exists() {
                fs::remove_dir_all(&target)?;
            }
            fs::rename(&tmp, &target)?;
            ctx.log(&format!(
                "exported {} train / {} val / {} test samples",
                data.train.len(),
                data.val.len(),
                data.test.len()
            ));
            Ok(())
        }
        Command::Train(args) => {
            let mut ctx = RunContext::new(&args)?;
            let data = ctx.dataset()?;
            let resolved = ctx.config.resolve();
            ctx.log(&format!(
                "training {:?} head, loss {:?}",
                resolved.train.model.head, resolved.train.loss.kind
            ));
            let (checkpoint, history) = train(&resolved.train, &data)?;
            let bytes = checkpoint.encode()?;
            write_atomic(&ctx.out_dir.join("checkpoint.ckpt"), &bytes)?;
            write_atomic(
                &ctx.out_dir.join("history.jsonl"),
                history_jsonl(&history).as_bytes(),
            )?;
            ctx.log(&format!(
                "best epoch {}: val clean {:.4}, val adv {:?}",
                checkpoint.meta.epoch, checkpoint.meta.val_clean_acc, checkpoint.meta.val_adv_acc
            ));
            Ok(())
        }
        Command::Attack(args) | Command::Eval(args) => {
            let mut ctx = RunContext::new(&args)?;
            let data = ctx.dataset()?;
            let resolved = ctx.config.resolve();
            let checkpoint = Checkpoint::load(&ctx.checkpoint_path())?;
            let split = data.split(&ctx.config.eval.split)?;
            ctx.log(&format!(
                "evaluating {} samples of split {}",
                ctx.config.eval.subset.unwrap_or(split.len()).min(split.len()),
                ctx.config.eval.split
            ));
            let (metrics, outcomes) = evaluate(
                &checkpoint.params,
                &checkpoint.meta.config.model,
                split,
                &resolved.eval,
            )?;
            write_atomic(
                &ctx.out_dir.join("metrics.json"),
                serde_json::to_string_pretty(&metrics)
                    .map_err(|e| Error::data(format!("metrics encode: {e}")))?
                    .as_bytes(),
            )?;
            write_atomic(
                &ctx.out_dir.join("outcomes.jsonl"),
                outcomes_jsonl(&outcomes).as_bytes(),
            )?;
            if ctx.config.eval.benchmarks {
                ctx.log("running corruption / background-swap / texture-swap benchmarks");
                let table = benchmark_eval(
                    &checkpoint.params,
                    &checkpoint.meta.config.model,
                    split,
                    data.spec.classes,
                    resolved.dataset.seed,
                )?;
                write_atomic(
                    &ctx.out_dir.join("benchmarks.json"),
                    serde_json::to_string_pretty(&table)
                        .map_err(|e| Error::data(format!("benchmark encode: {e}")))?
                        .as_bytes(),
                )?;
            }
            ctx.log(&format!(
                "clean {:.4}, adversarial {:.4}",
                metrics.clean_acc, metrics.adv_acc
            ));
            Ok(())
        }
        Command::Sweep(args) => {
            let mut ctx = RunContext::new(&args)?;
            let data = ctx.dataset()?;
            let resolved = ctx.config.resolve();
            ctx.log("running hyperparameter sweep");
            let rows = sweep(&resolved.train, &ctx.config.sweep, &data)?;
            write_atomic(
                &ctx.out_dir.join("sweep_results.jsonl"),
                sweep_rows_jsonl(&rows).as_bytes(),
            )?;
            write_tradeoff(&ctx, &rows)?;
            ctx.log(&format!("{} cells finished", rows.len()));
            Ok(())
        }
        Command::Report(args) => {
            let mut ctx = RunContext::new(&args)?;
            let text = fs::read_to_string(ctx.out_dir.join("sweep_results.jsonl"))
                .map_err(|e| Error::data(format!("sweep_results.jsonl: {e}")))?;
            let rows: Vec<SweepRow> = text
                .lines()
                .filter(|l| !l.is_empty())
                .map(|l| {
                    serde_json::from_str(l).map_err(|e| Error::data(format!("sweep row: {e}")))
                })
                .collect::<Result<_>>()?;
            write_tradeoff(&ctx, &rows)?;
            ctx.log("report written");
            Ok(())
        }
    }
}

fn write_tradeoff(ctx: &RunContext, rows: &[SweepRow]) -> Result<()> {
    if rows.len() < 2 {
        return Ok(()); // a single cell has no frontier
    }
    let head = format!("{:?}", ctx.config.model.head).to_lowercase();
    let tuples: Vec<(String, String, f64, f64, f64)> = rows
        .iter()
        .filter(|r| r.error.is_none())
        .map(|r| {
            let param = if ctx.config.loss.kind == crate::losses::LossKind::Trades {
                r.beta
            } else {
                r.c_seg
            };
            (
                format!("cell{}", r.index),
                head.clone(),
                param,
                r.clean_acc,
                r.adv_acc,
            )
        })
        .collect();
    if tuples.len() < 2 {
        return Ok(());
    }
    let report = tradeoff_report(&tuples)?;
    let csv = tradeoff_csv(&report);
    // Round-trip check keeps the emitted artifact honest.
    debug_assert_eq!(parse_tradeoff_csv(&csv).expect("csv parses"), report);
    write_atomic(&ctx.out_dir.join("tradeoff.csv"), csv.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes_match_contract() {
        assert_eq!(exit_code(&Error::config("x")), 2);
        assert_eq!(exit_code(&Error::usage("x")), 2);
        assert_eq!(exit_code(&Error::numeric("x")), 3);
        assert_eq!(
            exit_code(&Error::NonFiniteLoss {
                epoch: 0,
                batch: 0,
                components: "x".into()
            }),
            3
        );
        assert_eq!(
            exit_code(&Error::Io(std::io::Error::other("x"))),
            1
        );
    }
}
