use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use urlab::harness::{compare, load_curve, run_experiment, ExperimentConfig, HarnessError, Preset};
use urlab::oracle::{run_suite, Suite};

#[derive(Parser)]
#[command(name = "urlab", version, about = "Universal reinforcement learning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        cycles: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        parallel: Option<usize>,
        /// smoke or full; applied before the other flags.
        #[arg(long)]
        preset: Option<String>,
        /// Write every planner simulation to search_trace_<run>.jsonl.
        #[arg(long)]
        search_trace: bool,
    },
    /// Compare experiments from their summary.csv files.
    Compare {
        #[arg(required = true, num_args = 2..)]
        summaries: Vec<PathBuf>,
    },
    /// Run brute-force oracle checks: bayes, info-gain, planner, horizon or all.
    Oracle {
        #[arg(long, default_value = "all")]
        check: String,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, out, runs, cycles, seed, parallel, preset, search_trace } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(p) = preset {
                let p = Preset::parse(&p).ok_or_else(|| Failure::Config(format!("unknown preset {p}")))?;
                p.apply(&mut cfg);
            }
            if let Some(o) = out {
                cfg.output = Some(o);
            }
            if cfg.output.is_none() {
                return Err(Failure::Config("no output directory: set output in the config or pass --out".into()));
            }
            cfg.runs = runs.unwrap_or(cfg.runs);
            cfg.cycles = cycles.unwrap_or(cfg.cycles);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.search_trace |= search_trace;
            let result = run_experiment(cfg, parallel)?;
            let s = &result.summary;
            println!(
                "{}: {} runs x {} cycles, final mean score {:.4}, final explored {:.1}% (sd {:.1})",
                s.label,
                s.runs,
                s.cycles,
                s.mean.last().copied().unwrap_or(0.0),
                s.final_explored_mean,
                s.final_explored_sd
            );
            Ok(())
        }
        Command::Compare { summaries } => {
            let curves = summaries.iter().map(|p| load_curve(p)).collect::<Result<Vec<_>, _>>()?;
            let cmp = compare(curves)?;
            cmp.write_table(io::stdout()).map_err(|e| Failure::Runtime(e.to_string()))?;
            println!();
            cmp.write_tests(io::stdout()).map_err(|e| Failure::Runtime(e.to_string()))?;
            Ok(())
        }
        Command::Oracle { check } => {
            let suite = Suite::parse(&check).ok_or_else(|| Failure::Config(format!("unknown suite {check}")))?;
            let reports = run_suite(suite);
            for r in &reports {
                println!("{r}");
            }
            if reports.iter().all(|r| r.passed) {
                Ok(())
            } else {
                Err(Failure::Runtime("oracle check failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
