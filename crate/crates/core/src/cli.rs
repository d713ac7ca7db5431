//! `srnn` command line: train, forecast, evaluate, benchmark.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::forecast::write_mean_csv;
use crate::metrics::write_table;
use crate::pipeline::{self, write_output};
use crate::plot::forecast_svg;
use crate::trainer::Checkpoint;

#[derive(Debug, Parser)]
#[command(name = "srnn", version, about = "Stochastic GRU forecasting with variational training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model and write a checkpoint, training log and resolved config.
    Train(RunArgs),
    /// Condition a checkpoint on history and write the Monte-Carlo forecast.
    Forecast(ForecastArgs),
    /// Forecast and score against persistence on the prediction span.
    Evaluate(ForecastArgs),
    /// Train every enabled model on identical splits and tabulate nrmse.
    Benchmark(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML file layered over the profile defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Bundled defaults: options, pm25, traffic, chickenpox or synthetic.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_sims: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    /// Also write every sample path.
    #[arg(long)]
    pub paths: bool,
}

fn resolve(args: &RunArgs, fallback: Option<&RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&args.config, &args.profile, fallback) {
        (Some(path), profile, _) => RunConfig::load(path, profile.as_deref())?,
        (None, Some(p), _) => RunConfig::profile(p)?,
        (None, None, Some(c)) => c.clone(),
        (None, None, None) => {
            return Err(Error::Config("pass --config or --profile".into()));
        }
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.n_sims {
        cfg.forecast.n_sims = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn file_stem(label: &str) -> String {
    label.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase()
}

fn announce(path: &Path) {
    println!("wrote {}", path.display());
}

fn write_run_files(dir: &Path, cfg: &RunConfig, ck: &Checkpoint, log: &crate::trainer::TrainReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ck_path = dir.join("checkpoint.srnn");
    ck.save(&ck_path)?;
    announce(&ck_path);
    announce(&write_output(dir, "train_log.csv", &csv_bytes(|b| log.write_csv(b))?)?);
    announce(&write_output(dir, "resolved_config.toml", cfg.to_toml_string()?.as_bytes())?);
    Ok(())
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args, None)?;
    let prepared = pipeline::prepare(&cfg)?;
    let (ck, report) = pipeline::train_model(&cfg, &prepared)?;
    println!(
        "trained {} epochs; best validation ELBO {:.4} per step at epoch {}",
        report.epochs_run(),
        report.best_val_elbo(),
        report.best_epoch
    );
    write_run_files(&args.out_dir, &cfg, &ck, &report)
}

fn cmd_forecast(args: &ForecastArgs, score: bool) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = resolve(&args.run, Some(&ck.config))?;
    let prepared = pipeline::prepare_with(&cfg, ck.scaler.clone())?;
    let result = pipeline::forecast(&cfg, &ck, &prepared)?;
    let dir = &args.run.out_dir;
    announce(&write_output(dir, "forecast.csv", &csv_bytes(|b| result.write_csv(b))?)?);
    if args.paths {
        announce(&write_output(dir, "forecast_paths.csv", &csv_bytes(|b| result.write_paths_csv(b))?)?);
    }
    let svg = forecast_svg(
        &format!("{} forecast, {} paths", cfg.data.target, result.n_sims),
        &prepared.raw_windows.cond.y,
        &result,
        prepared.truth(),
    );
    announce(&write_output(dir, "forecast.svg", svg.as_bytes())?);
    if score {
        let reports = pipeline::evaluate(&cfg, &prepared, &result)?;
        for r in &reports {
            println!("{:<6} nrmse@{} = {:.6}", r.label, r.cutoffs.last().unwrap_or(&0), r.last().unwrap_or(f64::NAN));
        }
        announce(&write_output(dir, "eval.csv", &csv_bytes(|b| write_table(&reports, b))?)?);
    }
    Ok(())
}

fn cmd_benchmark(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args, None)?;
    let bench = pipeline::benchmark(&cfg)?;
    let dir = &args.out_dir;
    write_run_files(dir, &cfg, &bench.checkpoint, &bench.train_report)?;
    announce(&write_output(dir, "forecast_ours.csv", &csv_bytes(|b| bench.ours.write_csv(b))?)?);
    for (label, path) in &bench.baselines {
        let name = format!("forecast_{}.csv", file_stem(label));
        announce(&write_output(dir, &name, &csv_bytes(|b| write_mean_csv(path, b))?)?);
    }
    announce(&write_output(dir, "benchmark.csv", &csv_bytes(|b| write_table(&bench.reports, b))?)?);
    for r in &bench.reports {
        let cells: Vec<String> = r.nrmse.iter().map(|v| format!("{v:.4}")).collect();
        println!("{:<6} {}", r.label, cells.join(" "));
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Forecast(a) => cmd_forecast(a, false),
        Command::Evaluate(a) => cmd_forecast(a, true),
        Command::Benchmark(a) => cmd_benchmark(a),
    }
}
