//! Command-line front end: learn or compute gains, then simulate or ablate.
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};

use costeer::adp;
use costeer::cnf::{validate, GainSet};
use costeer::config::Config;
use costeer::plant::{build_matrices, Plant};
use costeer::sim::{self, Harness, Scenario, Variant};
use costeer::trigger::TriggerMode;

#[derive(Parser)]
#[command(version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn gains from an excitation run without using the plant model
    Learn {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Gain file to write
        #[arg(long)]
        out: PathBuf,
        /// Iteration history CSV; defaults to `<out>.history.csv`
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Compute reference gains from the known plant model
    Oracle {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured scenario with the proposed controller
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        gains: PathBuf,
        #[arg(long, value_enum, default_value = "self")]
        trigger: TriggerMode,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every controller variant on the configured scenario
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        gains: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Learn { config, out, history } => {
            let cfg = load_config(config.as_deref())?;
            let plant = Plant::new(cfg.plant)?;
            let (outcome, batch) = adp::learn(&plant, cfg.plant.l_s, cfg.plant.v_x, cfg.scenario.h, &cfg.adp)
                .context("learning failed")?;
            outcome.gains.save(&out)?;
            let history = history.unwrap_or_else(|| out.with_extension("history.csv"));
            std::fs::write(&history, outcome.iteration.history_csv())
                .with_context(|| format!("writing {}", history.display()))?;
            let last = outcome.iteration.history.last().expect("at least one iteration");
            println!("samples        {}", batch.rows());
            println!("iterations     {}", outcome.iteration.history.len());
            println!("rank           {:?}", last.ranks);
            println!("shift spread   {:.3e}", last.spread);
            println!("K              {:.6}", outcome.gains.k);
            println!("wrote {} and {}", out.display(), history.display());
        }
        Command::Oracle { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let m = build_matrices(&cfg.plant)?;
            let gains = GainSet::from_model(&m, &cfg.adp.q(), cfg.adp.r, cfg.adp.cnf)?;
            let report = validate(&gains, &m, &cfg.adp.q(), cfg.adp.r);
            gains.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("wrote {}", out.display());
        }
        Command::Simulate {
            config,
            gains,
            trigger,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let harness = Harness::from_config(&cfg, GainSet::load(&gains)?)?;
            let sc = Scenario::from_config(&cfg, Variant::proposed(trigger))?;
            let run = harness.run(&sc)?;
            sim::export(&run, &out)?;
            println!("{}", sim::summary_json(&run.summary));
        }
        Command::Ablate { config, gains, out } => {
            let cfg = load_config(config.as_deref())?;
            let harness = Harness::from_config(&cfg, GainSet::load(&gains)?)?;
            let sc = Scenario::from_config(&cfg, Variant::proposed(TriggerMode::SelfTriggered))?;
            let rows = harness.ablation(&sc)?;
            sim::export_ablation(&rows, &out)?;
            print!("{}", sim::ablation_csv(&rows));
        }
    }
    Ok(())
}
