//! Command-line pipeline: dataset generation, training, prediction,
//! evaluation, and plot exports.
//!
//! Exit codes: 0 success, 1 usage/validation error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use phyulstm::checkpoint::{load_checkpoint, save_checkpoint};
use phyulstm::dataset::{
    generate_synthetic_dataset, load_records, read_record_csv, save_records, Split,
};
use phyulstm::dynamics::{GroundMotionConfig, OscillatorParams};
use phyulstm::eval::{evaluate_model, export_plot_data, write_report};
use phyulstm::model::Regime;
use phyulstm::train::{train, write_epoch_log, TrainConfig};

#[derive(Parser)]
#[command(
    name = "phyulstm",
    about = "Physics-informed U-Net + LSTM surrogate modeling toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of simulated seismic responses.
    Generate(GenerateArgs),
    /// Train a surrogate model on a dataset split.
    Train(TrainArgs),
    /// Predict the response to one excitation record.
    Predict(PredictArgs),
    /// Evaluate a trained model on a dataset split.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of records to generate.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Record duration in seconds.
    #[arg(long, default_value_t = 50.0)]
    duration: f64,
    /// Sampling interval in seconds.
    #[arg(long, default_value_t = 0.05)]
    dt: f64,
    /// Peak ground acceleration scale in m/s^2.
    #[arg(long, default_value_t = 1.0)]
    intensity: f64,
    /// RNG seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Oscillator parameters as "m=1,c=1,k1=20,k2=200,gamma=1".
    #[arg(long)]
    params: Option<String>,
    /// Output directory for the manifest and record CSVs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (as written by `generate`).
    #[arg(long)]
    data: PathBuf,
    /// Loss regime: full-state, accel-only, or data-driven.
    #[arg(long, value_parser = parse_regime)]
    regime: Option<Regime>,
    /// Records to (re)assign to the training split before training.
    #[arg(long)]
    train_n: Option<usize>,
    /// Seed for the split and the parameter initialization.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    w1: Option<f64>,
    #[arg(long)]
    w2: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// JSON file with a full TrainConfig; CLI flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Optional CSV epoch-loss log.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    s.parse()
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Record CSV (header t,ag[,x,v,a,g]).
    #[arg(long)]
    record: PathBuf,
    /// Sampling interval of the record; defaults to the training dt.
    #[arg(long)]
    dt: Option<f64>,
    /// Output CSV of the predicted trajectory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which split to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
    /// Output JSON report path.
    #[arg(long)]
    report: PathBuf,
    /// Optional directory for per-record plot CSV exports.
    #[arg(long)]
    plots_dir: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn parse_oscillator(spec: &str) -> Result<OscillatorParams, CliError> {
    let mut p = OscillatorParams::default();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| usage(format!("bad --params entry '{part}' (expected key=value)")))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| usage(format!("bad --params value '{value}'")))?;
        match key.trim() {
            "m" => p.m = v,
            "c" => p.c = v,
            "k1" => p.k1 = v,
            "k2" => p.k2 = v,
            "gamma" => p.gamma = v,
            other => return Err(usage(format!("unknown --params key '{other}'"))),
        }
    }
    p.validate().map_err(|e| usage(e.to_string()))?;
    Ok(p)
}

fn cmd_generate(args: GenerateArgs) -> Result<(), CliError> {
    if !(args.duration > 0.0) || !(args.dt > 0.0) {
        return Err(usage("duration and dt must be positive"));
    }
    if args.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let params = match &args.params {
        Some(s) => parse_oscillator(s)?,
        None => OscillatorParams::default(),
    };
    let motion = GroundMotionConfig::default();
    let set = generate_synthetic_dataset(
        args.n,
        args.duration,
        args.dt,
        &params,
        args.intensity,
        args.seed,
        &motion,
    )
    .map_err(runtime)?;
    save_records(&args.out, &set).map_err(runtime)?;
    println!("generated {} records -> {}", set.len(), args.out.display());
    Ok(())
}

fn effective_train_config(args: &TrainArgs) -> Result<TrainConfig, CliError> {
    // Precedence: built-in defaults < config file < explicit flags.
    let mut config = match &args.config {
        Some(path) => {
            let body = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&body)
                .map_err(|e| usage(format!("bad config {}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(r) = args.regime {
        config.regime = r;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(lr) = args.lr {
        config.learning_rate = lr;
    }
    if let Some(w1) = args.w1 {
        config.w1 = w1;
    }
    if let Some(w2) = args.w2 {
        config.w2 = w2;
    }
    if let Some(p) = args.patience {
        config.patience = p;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let config = effective_train_config(&args)?;
    let mut set = load_records(&args.data).map_err(|e| usage(e.to_string()))?;
    if let Some(n_train) = args.train_n {
        set.split(n_train, config.seed)
            .map_err(|e| usage(e.to_string()))?;
    }
    let n_train = set
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .count();
    log::info!(
        "training regime {} on {n_train}/{} records",
        config.regime,
        set.len()
    );
    let (trained, metrics, epoch_log) = train(&set, &config).map_err(runtime)?;
    save_checkpoint(&args.out_checkpoint, &trained, &metrics).map_err(runtime)?;
    if let Some(log_path) = &args.log {
        write_epoch_log(log_path, &epoch_log).map_err(runtime)?;
    }
    println!(
        "trained {} epochs (best {:.6e} at epoch {}) -> {}",
        metrics.epochs_run,
        metrics.best_loss,
        metrics.best_epoch,
        args.out_checkpoint.display()
    );
    if metrics.diverged {
        println!("warning: run diverged; checkpoint holds the last finite best model");
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let (trained, _) = load_checkpoint(&args.checkpoint).map_err(|e| usage(e.to_string()))?;
    let dt = args.dt.unwrap_or(trained.dt);
    let rec = read_record_csv(&args.record, dt).map_err(|e| usage(e.to_string()))?;
    if (dt - trained.dt).abs() > 1e-9 {
        log::warn!(
            "record dt = {dt} differs from training dt = {}; the differentiator is rebuilt",
            trained.dt
        );
    }
    let pred = trained
        .model
        .predict(&rec.ag, dt, trained.config.regime)
        .map_err(runtime)?;

    let mut body = String::from("t,ag,x,v,a,g\n");
    for i in 0..pred.len() {
        body.push_str(&format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            pred.t[i], pred.ag[i], pred.x[i], pred.v[i], pred.a[i], pred.g[i]
        ));
    }
    std::fs::write(&args.out, body).map_err(runtime)?;
    println!("predicted {} steps -> {}", pred.len(), args.out.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let (trained, _) = load_checkpoint(&args.checkpoint).map_err(|e| usage(e.to_string()))?;
    let set = load_records(&args.data).map_err(|e| usage(e.to_string()))?;
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(usage(format!("unknown split '{other}'"))),
    };
    let label = args.data.display().to_string();
    let report = evaluate_model(&trained, &set, split, &label).map_err(runtime)?;
    write_report(&args.report, &report).map_err(runtime)?;
    if let Some(dir) = &args.plots_dir {
        export_split_plots(&trained, &set, split, dir)?;
    }
    if let Some(x) = &report.x {
        println!(
            "displacement r over {} records: mean {:.4}, min {:.4}, max {:.4}, fraction > 0.9: {:.3}",
            x.n, x.mean, x.min, x.max, x.fraction_above_0_9
        );
    }
    println!("report -> {}", args.report.display());
    Ok(())
}

fn export_split_plots(
    trained: &phyulstm::train::TrainedModel,
    set: &phyulstm::dataset::RecordSet,
    split: Split,
    dir: &Path,
) -> Result<(), CliError> {
    for rec in set.split_records(split) {
        if !rec.has_full_state() || rec.a.is_none() {
            continue;
        }
        let pred = trained
            .model
            .predict(&rec.ag, rec.dt, trained.config.regime)
            .map_err(runtime)?;
        let truth = phyulstm::dynamics::StateTrajectory {
            dt: rec.dt,
            t: (0..rec.len()).map(|i| i as f64 * rec.dt).collect(),
            x: rec.x.clone().unwrap(),
            v: rec.v.clone().unwrap(),
            a: rec.a.clone().unwrap(),
            g: rec.g.clone().unwrap(),
            ag: rec.ag.clone(),
        };
        export_plot_data(&pred, &truth, dir, &rec.id).map_err(runtime)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PHYULSTM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
