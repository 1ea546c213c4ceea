//! Command line front end: runs training experiments from JSON configs and
//! writes their artifacts (CSV log, summaries, final parameters) to a run
//! directory. Exit codes: 0 success, 1 config or usage error, 2 divergence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sparsekit::controller::within_tolerance;
use sparsekit::metrics::{layerwise_report, Lemma1Record};
use sparsekit::runner::{prune_train, sweep, train, RunLog, StepRow, CSV_HEADER};
use sparsekit::{Error, RunConfig};

#[derive(Parser)]
#[command(name = "sparsekit", version, about = "Sparsity-targeted training runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a config and write run artifacts.
    Train(RunArgs),
    /// Run one config across several values of a single key.
    Sweep(SweepArgs),
    /// Train the magnitude-pruning baseline (optimizer must be "prune").
    Prune(RunArgs),
    /// Rebuild summary.json and layerwise.json from an existing run directory.
    Report {
        /// Run directory holding config.json and runlog.csv.
        #[arg(long)]
        dir: PathBuf,
    },
    /// Parse and validate a config without running anything.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key before validation, as KEY=VALUE.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; keys mirror the run configuration exactly.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for run artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Override a config key, as KEY=VALUE (repeatable, dotted paths allowed).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Replace the run seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Config key to vary.
    #[arg(long)]
    axis: String,
    /// Comma-separated values for the axis.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
}

/// Schema of summary.json.
#[derive(Debug, Serialize, Deserialize)]
struct ReportSummary {
    config_hash: String,
    final_sparsity: f64,
    target_sparsity: Option<f64>,
    within_tolerance: Option<bool>,
    steps_to_tolerance: Option<u64>,
    best_val_acc: f64,
    lambda_final: f64,
    violations_lemma1: Option<u64>,
}

/// Entry of the sweep-level summary.json.
#[derive(Debug, Serialize, Deserialize)]
struct SweepEntry {
    value: String,
    dir: String,
    summary: ReportSummary,
}

#[derive(Debug, Serialize, Deserialize)]
struct SweepSummary {
    axis: String,
    values: Vec<String>,
    runs: Vec<SweepEntry>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests land here too; those exit cleanly.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = dispatch(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(Error::Diverged { .. }) = cause.downcast_ref::<Error>() {
            return 2;
        }
    }
    1
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            let log = train(&cfg)?;
            finish_run(&args.out, &cfg, &log)
        }
        Command::Prune(args) => {
            let cfg = load_config(&args)?;
            let log = prune_train(&cfg)?;
            finish_run(&args.out, &cfg, &log)
        }
        Command::Sweep(args) => run_sweep(args),
        Command::Report { dir } => {
            let summary = emit_report(&dir)?;
            println!(
                "reported {}: final sparsity {:.6}, lambda {:.6}",
                dir.display(),
                summary.final_sparsity,
                summary.lambda_final
            );
            Ok(())
        }
        Command::ValidateConfig { config, set } => {
            let args = RunArgs { config, out: PathBuf::new(), set, seed: None };
            let cfg = load_config(&args)?;
            println!("config ok: {}", config_hash(&cfg)?);
            Ok(())
        }
    }
}

fn load_config(args: &RunArgs) -> anyhow::Result<RunConfig> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut cfg = RunConfig::from_json(&text)?;
    for kv in &args.set {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got '{kv}'"))?;
        cfg = cfg.with_override(key, value)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config_hash(cfg: &RunConfig) -> anyhow::Result<String> {
    let canonical = cfg.canonical_json()?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn run_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let base = load_config(&args.run)?;
    let logs = sweep(&base, &args.axis, &args.values)?;
    let mut runs = Vec::with_capacity(logs.len());
    for (value, (cfg, log)) in args.values.iter().zip(&logs) {
        let dir_name = format!("{}={}", args.axis, sanitize(value));
        let dir = args.run.out.join(&dir_name);
        let summary = write_run_artifacts(&dir, cfg, log)?;
        println!(
            "{dir_name}: final sparsity {:.6}, lambda {:.6}",
            summary.final_sparsity, summary.lambda_final
        );
        runs.push(SweepEntry { value: value.clone(), dir: dir_name, summary });
    }
    let top = SweepSummary { axis: args.axis, values: args.values.clone(), runs };
    write_json(&args.run.out.join("summary.json"), &top)?;
    println!("wrote {}", args.run.out.join("summary.json").display());
    Ok(())
}

/// Keep directory names tame regardless of the override value.
fn sanitize(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || ".-_".contains(c) { c } else { '_' })
        .collect()
}

fn finish_run(out: &Path, cfg: &RunConfig, log: &RunLog) -> anyhow::Result<()> {
    let summary = write_run_artifacts(out, cfg, log)?;
    println!(
        "wrote {}: final sparsity {:.6}, lambda {:.6}",
        out.display(),
        summary.final_sparsity,
        summary.lambda_final
    );
    Ok(())
}

fn write_run_artifacts(dir: &Path, cfg: &RunConfig, log: &RunLog) -> anyhow::Result<ReportSummary> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut canonical = cfg.canonical_json()?;
    canonical.push('\n');
    fs::write(dir.join("config.json"), canonical.as_bytes())?;

    let file = fs::File::create(dir.join("runlog.csv"))?;
    let mut writer = std::io::BufWriter::new(file);
    log.write_csv(&mut writer)?;
    writer.flush()?;

    // The monitor file exists exactly when the run carried the monitor, so a
    // later report can tell "inactive" apart from "active, zero records".
    if log.summary.violations_lemma1.is_some() {
        write_json(&dir.join("lemma1.json"), &log.lemma1)?;
    }
    write_json(&dir.join("final_store.json"), &log.checkpoint.store)?;

    let last_step = log.rows.last().map_or(0, |r| r.step);
    write_json(&dir.join("layerwise.json"), &layerwise_report(&log.checkpoint.store, last_step)?)?;

    let summary = ReportSummary {
        config_hash: config_hash(cfg)?,
        final_sparsity: log.summary.final_sparsity_reg,
        target_sparsity: cfg.target_sparsity,
        within_tolerance: log.summary.reached_target,
        steps_to_tolerance: log.summary.steps_to_tolerance,
        best_val_acc: log.summary.best_val_acc,
        lambda_final: log.summary.lambda_final,
        violations_lemma1: log.summary.violations_lemma1,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Rebuild summary.json and layerwise.json from the files a run left behind.
fn emit_report(dir: &Path) -> anyhow::Result<ReportSummary> {
    let cfg_text = fs::read_to_string(dir.join("config.json"))
        .with_context(|| format!("reading {}", dir.join("config.json").display()))?;
    let cfg = RunConfig::from_json(&cfg_text)?;

    let csv = fs::read_to_string(dir.join("runlog.csv"))
        .with_context(|| format!("reading {}", dir.join("runlog.csv").display()))?;
    let mut lines = csv.lines();
    match lines.next() {
        Some(header) if header == CSV_HEADER => {}
        _ => return Err(anyhow!("runlog.csv is missing the header row")),
    }
    let rows = lines.map(StepRow::from_csv_line).collect::<Result<Vec<_>, _>>()?;
    let last = rows.last().ok_or_else(|| anyhow!("runlog.csv holds no data rows"))?;

    let store_text = fs::read_to_string(dir.join("final_store.json"))
        .with_context(|| format!("reading {}", dir.join("final_store.json").display()))?;
    let store: sparsekit::ParamStore = serde_json::from_str(&store_text)
        .map_err(|e| anyhow!("final_store.json did not parse: {e}"))?;
    write_json(&dir.join("layerwise.json"), &layerwise_report(&store, last.step)?)?;

    let violations_lemma1 = match fs::read_to_string(dir.join("lemma1.json")) {
        Ok(text) => {
            let records: Vec<Lemma1Record> =
                serde_json::from_str(&text).map_err(|e| anyhow!("lemma1.json did not parse: {e}"))?;
            Some(records.iter().filter(|r| r.violation).count() as u64)
        }
        Err(_) => None,
    };

    let zeta = cfg.controller.zeta;
    let summary = ReportSummary {
        config_hash: config_hash(&cfg)?,
        final_sparsity: last.sparsity_reg,
        target_sparsity: cfg.target_sparsity,
        within_tolerance: cfg
            .target_sparsity
            .map(|t| within_tolerance(last.sparsity_reg, t, zeta)),
        steps_to_tolerance: cfg.target_sparsity.and_then(|t| {
            rows.iter().find(|r| within_tolerance(r.sparsity_reg, t, zeta)).map(|r| r.step)
        }),
        best_val_acc: rows.iter().fold(0.0_f64, |acc, r| acc.max(r.val_acc)),
        lambda_final: last.lambda,
        violations_lemma1,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| anyhow!("serializing {}: {e}", path.display()))?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
