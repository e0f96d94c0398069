use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use darc_cli::config::{emit_config, parse_config, preset_by_name, ExperimentConfig, ExperimentKind, PRESET_NAMES};
use darc_cli::experiment::{output_root, run_experiment, RunError, RunOutcome};
use darc_cli::plot::{render_svg, PlotSpec};
use darc_core::mdp::{validate_mdp, TabularMdp};

/// Off-dynamics RL experiments with classifier-estimated reward corrections.
#[derive(Debug, Parser)]
#[command(name = "darc", version)]
struct Cli {
    /// Directory run outputs go under; overrides DARC_OUTPUT_ROOT.
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// Run the exact bound checks on random small instances.
    Theory {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
    /// Sweep the archery objectives over launch angles.
    Archery {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Training shots per domain.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// List invariant violations of an MDP in `mdp v1` text format.
    Validate { mdp: PathBuf },
    /// Render CSV columns as an SVG line chart.
    Plot {
        csv: PathBuf,
        /// `x:y1,y2[:title]`
        spec: String,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Print the default config of an experiment kind.
    Template {
        kind: String,
        /// Start from a tuned gridworld preset instead of the defaults.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn report(result: Result<RunOutcome, RunError>) -> u8 {
    match result {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            for f in &outcome.files {
                eprintln!("wrote {}", f.display());
            }
            outcome.exit_code() as u8
        }
        Err(e @ RunError::Config(_)) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn read(path: &PathBuf) -> Result<String, u8> {
    fs::read_to_string(path).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        1
    })
}

fn run(cli: Cli) -> Result<u8, u8> {
    let root = cli.output_root.unwrap_or_else(output_root);
    match cli.command {
        Command::Run { config } => {
            let cfg = parse_config(&read(&config)?).map_err(|e| {
                eprintln!("error: {}: {e}", config.display());
                1
            })?;
            Ok(report(run_experiment(&cfg, &root)))
        }
        Command::Theory { instances, seeds } => {
            let mut cfg = ExperimentConfig::for_kind(ExperimentKind::TheorySuite);
            cfg.theory.instances = instances;
            cfg.seeds = seeds;
            Ok(report(run_experiment(&cfg, &root)))
        }
        Command::Archery { seeds, episodes } => {
            let mut cfg = ExperimentConfig::for_kind(ExperimentKind::ArcherySweep);
            cfg.seeds = seeds;
            if let Some(n) = episodes {
                cfg.archery.episodes_per_domain = n;
            }
            Ok(report(run_experiment(&cfg, &root)))
        }
        Command::Validate { mdp } => {
            let parsed = TabularMdp::from_text(&read(&mdp)?).map_err(|e| {
                eprintln!("error: {}: {e}", mdp.display());
                1
            })?;
            let violations = validate_mdp(&parsed);
            for v in &violations {
                println!("{v}");
            }
            if violations.is_empty() {
                println!("ok: {} states, {} actions, horizon {}", parsed.num_states(), parsed.num_actions(), parsed.horizon());
                Ok(0)
            } else {
                Ok(1)
            }
        }
        Command::Plot { csv, spec, out } => {
            let spec: PlotSpec = spec.parse().map_err(|e| {
                eprintln!("error: {e}");
                1
            })?;
            let svg = render_svg(&read(&csv)?, &spec).map_err(|e| {
                eprintln!("error: {e}");
                1
            })?;
            let out = out.unwrap_or_else(|| csv.with_extension("svg"));
            fs::write(&out, svg).map_err(|e| {
                eprintln!("error: {}: {e}", out.display());
                2
            })?;
            eprintln!("wrote {}", out.display());
            Ok(0)
        }
        Command::Template { kind, preset, seeds } => {
            let kind: ExperimentKind = kind.parse().map_err(|e| {
                eprintln!("error: {e}");
                1
            })?;
            let mut cfg = match preset {
                Some(name) => {
                    let p = preset_by_name(&name).ok_or_else(|| {
                        eprintln!("error: unknown preset `{name}`; known: {}", PRESET_NAMES.join(", "));
                        1
                    })?;
                    ExperimentConfig::from_preset(kind, &p, vec![0, 1, 2])
                }
                None => ExperimentConfig::for_kind(kind),
            };
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
            }
            print!("{}", emit_config(&cfg));
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let code = run(Cli::parse()).unwrap_or_else(|c| c);
    ExitCode::from(code)
}
