use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use desal::experiment::{self, ExperimentConfig, ExperimentReport};
use desal::synthdata::{self, GenSpec, LabeledDataset};
use desal::{sal, stats, Error, SalModel};

#[derive(Parser)]
#[command(name = "desal", version, about = "Select-additive learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train.csv and test.csv (with channel manifests).
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all three stages on a CSV dataset and save the model as JSON.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated channel names; defaults to every column.
        #[arg(long)]
        modality: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a saved model on a CSV dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        modality: Option<String>,
        /// Write the result JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full experiment: every seed and modality set, then the report files.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run this single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rewrite the CSV tables from a report.json and print the summary.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

fn runtime(e: Error) -> Failure {
    match e {
        Error::Config(_) => Failure::Config(e),
        other => Failure::Runtime(other),
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    match path {
        Some(p) => ExperimentConfig::load(p).map_err(Failure::Config),
        None => Ok(ExperimentConfig::default()),
    }
}

fn channels(data: LabeledDataset, modality: Option<&str>) -> Result<LabeledDataset, Failure> {
    match modality {
        None => Ok(data),
        Some(list) => {
            let names: Vec<&str> = list.split(',').map(str::trim).collect();
            data.select_channels(&names).map_err(runtime)
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.into()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::Runtime(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Generate { config, seed, out } => {
            let cfg = load_config(config.as_deref())?;
            let spec = GenSpec {
                seed: seed.unwrap_or(cfg.gen.seed),
                ..cfg.gen
            };
            fs::create_dir_all(&out).map_err(|e| Failure::Runtime(Error::Io {
                path: out.clone(),
                source: e,
            }))?;
            let (train, test) = synthdata::generate(&spec).map_err(runtime)?;
            synthdata::save_csv(&train, &out.join("train.csv")).map_err(runtime)?;
            synthdata::save_csv(&test, &out.join("test.csv")).map_err(runtime)?;
            log::info!("wrote {} train and {} test rows to {}", train.len(), test.len(), out.display());
        }
        Command::Train {
            config,
            data,
            modality,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let sal_cfg = sal::SalConfig {
                seed: seed.unwrap_or(cfg.sal.seed),
                ..cfg.sal
            };
            let data = channels(synthdata::load_csv(&data).map_err(runtime)?, modality.as_deref())?;
            let model = experiment::train_sal(&data, &sal_cfg).map_err(runtime)?;
            write_json(&out, &model)?;
        }
        Command::Eval {
            model,
            data,
            modality,
            out,
        } => {
            let text = fs::read_to_string(&model).map_err(|e| Failure::Runtime(Error::Io {
                path: model.clone(),
                source: e,
            }))?;
            let model: SalModel = serde_json::from_str(&text).map_err(|e| Failure::Runtime(e.into()))?;
            let data = channels(synthdata::load_csv(&data).map_err(runtime)?, modality.as_deref())?;
            let pred = sal::predict(&model, &data.features).map_err(runtime)?;
            let acc = stats::accuracy(&pred, &data.label_bits()).map_err(runtime)?;
            let result = json!({ "accuracy": acc, "rows": data.len() });
            match out {
                Some(path) => write_json(&path, &result)?,
                None => println!("{result}"),
            }
        }
        Command::Run { config, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let report = experiment::run_experiment(&cfg).map_err(runtime)?;
            experiment::emit_report(&report, &dir).map_err(runtime)?;
            print_summary(&report);
        }
        Command::Report { input, out } => {
            let report = ExperimentReport::load(&input).map_err(runtime)?;
            if let Some(dir) = out {
                experiment::emit_report(&report, &dir).map_err(runtime)?;
            }
            print_summary(&report);
        }
    }
    Ok(())
}

fn print_summary(report: &ExperimentReport) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    println!("{:<24} {:>9} {:>9} {:>9} {:>6}", "modality", "baseline", "sal", "p", "done");
    for s in &report.summaries {
        println!(
            "{:<24} {:>9} {:>9} {:>9} {:>3}/{}",
            s.modality,
            fmt(s.median_baseline_test),
            fmt(s.median_sal_test),
            fmt(s.permutation.as_ref().map(|p| p.p_value)),
            s.completed,
            s.completed + s.failed
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Config(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e}");
            ExitCode::from(f.code())
        }
    }
}
