//! `cross`: train and evaluate learned signal controllers, compare them with
//! the classical baselines, and generate synthetic scenarios.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use cross_core::harness::{compare, write_report, Method};
use cross_core::{evaluate, train, Agent, ExperimentConfig};
use cross_sim::generate::{self, DemandSpec, Profile, RoadClass};
use cross_sim::{MetricReport, Scenario, EPISODE_SECONDS};

#[derive(Parser)]
#[command(name = "cross", version, about = "Learned traffic-signal control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML experiment config.
    Train {
        config: PathBuf,
        /// Overrides `train.iterations`.
        #[arg(long)]
        iterations: Option<usize>,
        /// Overrides the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint; prints one CSV row per episode.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 3)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Runs a method × scenario × seed matrix and writes rows.csv,
    /// summary.csv and trip_duration.svg.
    Compare {
        /// fixed-time, max-pressure, random or cross…=<checkpoint>; repeatable.
        #[arg(long = "method", required = true)]
        methods: Vec<String>,
        #[arg(long = "scenario", required = true)]
        scenarios: Vec<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = EPISODE_SECONDS)]
        horizon: u32,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Writes a synthetic scenario file.
    GenScenario {
        #[command(subcommand)]
        layout: Layout,
        #[arg(long, global = true, default_value = "scenario.json")]
        out: PathBuf,
        /// Network-wide demand in vehicles per minute.
        #[arg(long, global = true, default_value_t = 60.0)]
        rate: f64,
        #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Flat)]
        profile: ProfileArg,
        #[arg(long, global = true, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum Layout {
    /// Four-way intersections on a rows × cols lattice.
    Grid { rows: usize, cols: usize },
    /// A corridor of n intersections with a dominant main road.
    Arterial { n: usize },
    /// A lattice whose top row is T-junctions.
    Mixed { rows: usize, cols: usize },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Flat,
    Peaked,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            iterations,
            output,
        } => {
            let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            if let Some(o) = output {
                cfg.output = o;
            }
            if cfg.scenarios.is_empty() {
                bail!("{} lists no scenarios", config.display());
            }
            let out = train(&cfg, |log| {
                let returns: Vec<String> = log.returns.iter().map(|r| format!("{r:.2}")).collect();
                eprintln!("iteration {:>4}  return {}", log.iteration, returns.join(" "));
            })?;
            println!("{}", out.checkpoint.display());
        }
        Command::Evaluate {
            checkpoint,
            scenario,
            episodes,
            seed,
        } => {
            let agent = Agent::load(&checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let sc = Scenario::load(&scenario).with_context(|| format!("loading scenario {}", scenario.display()))?;
            let reports = evaluate(Arc::new(agent), &sc, episodes, seed)?;
            println!("episode,{}", MetricReport::FIELDS.join(","));
            for (e, r) in reports.iter().enumerate() {
                let cells: Vec<String> = r.values().iter().map(f64::to_string).collect();
                println!("{e},{}", cells.join(","));
            }
        }
        Command::Compare {
            methods,
            scenarios,
            seeds,
            horizon,
            out,
        } => {
            let methods = methods
                .iter()
                .map(|m| Method::parse(m).with_context(|| format!("method `{m}`")))
                .collect::<Result<Vec<_>>>()?;
            let scenarios = scenarios
                .iter()
                .map(|p| Scenario::load(p).with_context(|| format!("loading scenario {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let seeds: Vec<u64> = (0..seeds).collect();
            let rows = compare(&methods, &scenarios, &seeds, horizon)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for s in write_report(&out, &rows)? {
                println!(
                    "{:<16} {:<20} queue {:>8.3}  trip duration {:>8.2} s",
                    s.method, s.scenario, s.mean[0], s.mean[5]
                );
            }
        }
        Command::GenScenario {
            layout,
            out,
            rate,
            profile,
            seed,
        } => {
            let demand = DemandSpec {
                total_rate_vpm: rate,
                profile: match profile {
                    ProfileArg::Flat => Profile::Flat,
                    ProfileArg::Peaked => Profile::Peaked,
                },
                seed,
            };
            let doc = match layout {
                Layout::Grid { rows, cols } => generate::grid(rows, cols, RoadClass::default(), &demand)?,
                Layout::Arterial { n } => generate::arterial(n, &demand)?,
                Layout::Mixed { rows, cols } => generate::mixed(rows, cols, RoadClass::default(), &demand)?,
            };
            // Round-trip through the loader so a bad layout fails here rather than at training time.
            Scenario::from_doc(&doc)?;
            doc.save(&out).with_context(|| format!("writing {}", out.display()))?;
            println!("{}", out.display());
        }
    }
    Ok(())
}
