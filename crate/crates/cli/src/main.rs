use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use dreamland::experiment::{ablate, find_summaries, report_tables, Axis, ExperimentConfig, Pipeline, RunPaths};

/// Train controllers inside dropout-randomized learned dream environments.
#[derive(Parser, Debug)]
#[command(name = "dreamland", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML). Defaults apply to anything it leaves out.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set dream.p_infer=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Global seed (same as `--set seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory. Defaults to `<output root>/<config hash>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Default output root when neither `--out` nor `output_dir` is set.
    #[arg(long, env = "DDL_OUTPUT_ROOT", default_value = "runs", global = true)]
    output_root: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect train and test trajectories from the real environment.
    Collect,
    /// Fit the dynamics model(s) to the collected data.
    TrainDynamics,
    /// Search a controller with CMA-ES inside dream environments.
    TrainController,
    /// Test the selected controller in the real environment.
    EvalReal,
    /// Run the whole pipeline at every point of a parameter sweep.
    Ablate {
        /// Sweep axis `name=v1,v2,...`; several axes form a grid.
        #[arg(long = "axis", value_name = "NAME=V1,V2")]
        axes: Vec<String>,
    },
    /// Tabulate every run summary found under a directory.
    Report {
        /// Directory to scan. Defaults to the output root.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

struct UsageError(String);

fn load_config(common: &Common) -> Result<ExperimentConfig, UsageError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| UsageError(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg = cfg.with_override(k.trim(), v.trim()).map_err(|e| UsageError(e.to_string()))?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run_dir(common: &Common, cfg: &ExperimentConfig, prefix: &str) -> PathBuf {
    if let Some(out) = &common.out {
        return out.clone();
    }
    if !cfg.output_dir.is_empty() {
        return PathBuf::from(&cfg.output_dir);
    }
    common.output_root.join(format!("{prefix}{}", cfg.hash()))
}

fn print_summary_line(label: &str, path: &Path) {
    println!("{label}: {}", path.display());
}

fn execute(cli: &Cli, cfg: ExperimentConfig) -> Result<()> {
    let mut pipeline = Pipeline::new();
    match &cli.command {
        Command::Collect => {
            let paths = RunPaths::new(run_dir(&cli.common, &cfg, ""));
            let data = pipeline.collect(&cfg, &paths)?;
            println!(
                "collected {} train and {} test trajectories ({})",
                data.train.len(),
                data.test.len(),
                data.train.info.env
            );
            print_summary_line("train", &paths.train_data());
            print_summary_line("test", &paths.test_data());
        }
        Command::TrainDynamics => {
            let paths = RunPaths::new(run_dir(&cli.common, &cfg, ""));
            let models = pipeline.train_dynamics(&cfg, &paths)?;
            for (i, r) in models.reports.iter().enumerate() {
                let last = r.epochs.last().context("no epochs were run")?;
                let test = last.test.map(|t| format!("{:.4}", t.total)).unwrap_or_else(|| "n/a".into());
                println!("model {i}: final train loss {:.4}, test loss {test}", last.train.total);
                print_summary_line("checkpoint", &paths.model(i));
            }
        }
        Command::TrainController => {
            let paths = RunPaths::new(run_dir(&cli.common, &cfg, ""));
            let outcome = pipeline.train_controller(&cfg, &paths)?;
            for e in &outcome.board.entries {
                println!("generation {:>5}: dream return {:.3} ± {:.3}", e.generation, e.dream_mean, e.dream_std);
            }
            print_summary_line("controller", &paths.controller());
        }
        Command::EvalReal => {
            let paths = RunPaths::new(run_dir(&cli.common, &cfg, ""));
            let s = pipeline.eval_real(&cfg, &paths)?;
            println!("real return {:.3} ± {:.3} over {} episodes", s.real_mean, s.real_std, s.real_episodes);
            print_summary_line("summary", &paths.summary());
        }
        Command::Ablate { axes } => {
            let axes: Vec<Axis> = axes.iter().map(|a| Axis::parse(a)).collect::<Result<_, _>>()?;
            let root = run_dir(&cli.common, &cfg, "ablate-");
            let rows = ablate(&cfg, &axes, &root)?;
            for r in &rows {
                println!("{}  real {:.3} ± {:.3}", r.config_hash, r.real_mean, r.real_std);
            }
            print_summary_line("table", &root.join("ablation.csv"));
        }
        Command::Report { dir } => {
            let dir = dir.clone().unwrap_or_else(|| cli.common.output_root.clone());
            let summaries = find_summaries(&dir).with_context(|| format!("scanning {}", dir.display()))?;
            let (runs, settings) = report_tables(&summaries);
            std::fs::write(dir.join("report_runs.csv"), &runs)?;
            std::fs::write(dir.join("report_settings.csv"), &settings)?;
            print!("{settings}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match load_config(&cli.common) {
        Ok(c) => c,
        Err(UsageError(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    if let Command::Ablate { axes } = &cli.command {
        if let Err(e) = axes.iter().try_for_each(|a| {
            let axis = Axis::parse(a)?;
            dreamland::experiment::sweep_points(&cfg, std::slice::from_ref(&axis)).map(|_| ())
        }) {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(&cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
