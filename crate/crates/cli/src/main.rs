use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use mvmark_core::harness::{run_sweep, ExperimentConfig, Pipeline, RunManifest, Target, MANIFEST_FILE};
use mvmark_core::multiview::{run_transfer_experiment, TransferConfig};

/// Multi-view trigger-set watermarking pipeline.
#[derive(Parser, Debug)]
#[command(name = "mvmark", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset cache directory for downloaded data.
    #[arg(long, env = "MVMARK_DATA_DIR", hide_env_values = true)]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the selector model and write the trigger set.
    SelectTrigger(Common),
    /// Train the watermarked source model.
    TrainSource(Common),
    /// Train the benign reference model.
    TrainBenign(Common),
    /// Run every configured attack against the source model.
    Attack(Common),
    /// Verify ownership of the source, the independent model and all surrogates.
    Verify(Common),
    /// Linear multi-view transfer simulation; writes CSV files.
    SimulateMultiview(Common),
    /// Full pipeline (and the sweep, if configured).
    Run(Common),
    /// Rebuild the results table from an existing run directory.
    Report(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SelectTrigger(_) => "select-trigger",
            Command::TrainSource(_) => "train-source",
            Command::TrainBenign(_) => "train-benign",
            Command::Attack(_) => "attack",
            Command::Verify(_) => "verify",
            Command::SimulateMultiview(_) => "simulate-multiview",
            Command::Run(_) => "run",
            Command::Report(_) => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::SelectTrigger(c)
            | Command::TrainSource(c)
            | Command::TrainBenign(c)
            | Command::Attack(c)
            | Command::Verify(c)
            | Command::SimulateMultiview(c)
            | Command::Run(c)
            | Command::Report(c) => c,
        }
    }
}

/// An error tagged with the stage it came from.
struct Failure {
    stage: String,
    error: anyhow::Error,
}

impl Failure {
    fn at(stage: &str) -> impl FnOnce(anyhow::Error) -> Failure + '_ {
        move |error| Failure {
            stage: stage.to_string(),
            error,
        }
    }
}

impl From<mvmark_core::Error> for Failure {
    fn from(e: mvmark_core::Error) -> Self {
        Failure {
            stage: e.stage().unwrap_or("setup").to_string(),
            error: e.into(),
        }
    }
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| anyhow!("--config is required"))
        .map_err(Failure::at("config"))?;
    let mut cfg = ExperimentConfig::load(path).map_err(|e| Failure::at("config")(e.into()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| anyhow!("no output directory: pass --out or set output_dir"))
        .map_err(Failure::at("config"))?;
    Ok((cfg, out))
}

fn run_target(common: &Common, target: Target) -> Result<PathBuf, Failure> {
    let (cfg, out) = load_config(common)?;
    let mut p = Pipeline::open(cfg, &out)?;
    p.run_until(target)?;
    Ok(out)
}

fn simulate(common: &Common) -> Result<PathBuf, Failure> {
    let stage = "simulate-multiview";
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::at("config"))?;
            toml::from_str::<TransferConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .map_err(Failure::at("config"))?
        }
        None => TransferConfig::default(),
    };
    if let Some(seed) = common.seed {
        let n = cfg.seeds.len() as u64;
        cfg.seeds = (seed..seed + n).collect();
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let report = run_transfer_experiment(&cfg).map_err(|e| Failure::at(stage)(e.into()))?;
    let mut rates = String::from("w0,w1,transfer_rate\n");
    for (w0, w1, r) in report.rates() {
        rates.push_str(&format!("{w0},{w1},{r}\n"));
    }
    let write = |name: &str, text: &str| -> anyhow::Result<()> {
        std::fs::create_dir_all(&out)?;
        std::fs::write(out.join(name), text).with_context(|| format!("writing {name}"))
    };
    write("transfer.csv", &report.to_csv()).map_err(Failure::at(stage))?;
    write("transfer_rates.csv", &rates).map_err(Failure::at(stage))?;
    for (w0, w1, r) in report.rates() {
        println!("w=({w0}, {w1}) transfer rate {r:.3}");
    }
    Ok(out)
}

fn report_only(common: &Common) -> Result<PathBuf, Failure> {
    match &common.config {
        Some(_) => {
            let (cfg, out) = load_config(common)?;
            let mut p = Pipeline::open(cfg, &out)?;
            p.report()?;
            Ok(out)
        }
        None => {
            let out = common
                .out
                .clone()
                .ok_or_else(|| anyhow!("pass --out (or --config) to locate the run"))
                .map_err(Failure::at("report"))?;
            let manifest = RunManifest::load(&out.join(MANIFEST_FILE)).map_err(|e| Failure::at("report")(e.into()))?;
            let store = mvmark_core::harness::ArtifactStore::open(&out)?;
            mvmark_core::harness::emit_report(&manifest, &store).map_err(|e| Failure::at("report")(e.into()))?;
            Ok(out)
        }
    }
}

fn full_run(common: &Common) -> Result<PathBuf, Failure> {
    let (cfg, out) = load_config(common)?;
    if cfg.sweep.is_some() {
        run_sweep(&cfg, &out)?;
    } else {
        let mut p = Pipeline::open(cfg, &out)?;
        p.run_until(Target::Report)?;
    }
    Ok(out)
}

fn print_summary(out: &Path) {
    if let Ok(text) = std::fs::read_to_string(out.join("results.csv")) {
        print!("{text}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let common = cli.command.common();
    if let Some(dir) = &common.data_dir {
        std::env::set_var("MVMARK_DATA_DIR", dir);
    }
    let result = match &cli.command {
        Command::SelectTrigger(c) => run_target(c, Target::Trigger),
        Command::TrainSource(c) => run_target(c, Target::Source),
        Command::TrainBenign(c) => run_target(c, Target::Benign),
        Command::Attack(c) => run_target(c, Target::Attacks),
        Command::Verify(c) => run_target(c, Target::Verify),
        Command::SimulateMultiview(c) => simulate(c),
        Command::Run(c) => full_run(c),
        Command::Report(c) => report_only(c),
    };
    match result {
        Ok(out) => {
            if matches!(cli.command, Command::Run(_) | Command::Report(_)) {
                print_summary(&out);
            }
            log::info!("{} finished; outputs in {}", cli.command.name(), out.display());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("mvmark {}: stage `{}` failed: {:#}", cli.command.name(), f.stage, f.error);
            ExitCode::FAILURE
        }
    }
}
