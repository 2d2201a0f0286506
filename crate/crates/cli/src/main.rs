use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kinemap_core::pipeline::{self, Stage};
use kinemap_core::{RunConfig, Scenario};

#[derive(Parser)]
#[command(name = "kinemap", version, about = "Learn a tip representation of a planar arm from what it senses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage and write the manifest.
    Run(Common),
    /// Explore random postures and record sensations.
    Explore(Common),
    /// Isomap embedding and supervised pretraining.
    Pretrain(Common),
    /// Minimize the pairwise cost with RPROP.
    Train(Common),
    /// Angle between learned and true null spaces on the evaluation grid.
    EvalNullspace(Common),
    /// Reach grid targets with the learned and the true map.
    Reach(Common),
    /// Write manifest.json from existing artifacts.
    Export(Common),
    /// Print the effective configuration as TOML.
    Config(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// 1 = position sensor, 2 = retina.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    scenario: Option<u8>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    /// Override a configuration value, e.g. `--set train.mu=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.scenario {
            cfg.scenario = Scenario::try_from(s).map_err(anyhow::Error::msg)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.output {
            cfg.output_dir = out.clone();
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<()> {
    let (stage, common) = match &cli.command {
        Command::Run(c) => (None, c),
        Command::Explore(c) => (Some(Stage::Explore), c),
        Command::Pretrain(c) => (Some(Stage::Pretrain), c),
        Command::Train(c) => (Some(Stage::Train), c),
        Command::EvalNullspace(c) => (Some(Stage::EvalNullspace), c),
        Command::Reach(c) => (Some(Stage::Reach), c),
        Command::Export(c) => (Some(Stage::Export), c),
        Command::Config(c) => {
            print!("{}", c.resolve()?.to_toml()?);
            return Ok(());
        }
    };
    let cfg = common.resolve()?;
    match stage {
        Some(stage) => {
            for path in pipeline::run_stage(&cfg, stage)? {
                println!("{}", path.display());
            }
        }
        None => {
            let manifest = pipeline::run(&cfg)?;
            let m = &manifest.metrics;
            let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
            println!("output        {}", cfg.output_dir.display());
            println!("pretrain mse  {} -> {}", show(m.pretrain_initial_mse), show(m.pretrain_final_mse));
            println!("cost Q        {} -> {}", show(m.q_initial), show(m.q_final));
            println!("divergence    {} deg (std {})", show(m.divergence_mean_deg), show(m.divergence_std_deg));
            println!("endpoints     {} agree", show(m.endpoint_agreement_rate));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
