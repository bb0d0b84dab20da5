//! `rasim` - seeded, reproducible runs of the IoT cell simulator.
//!
//! Subcommands: `generate` a traffic trace, `train` an agent checkpoint,
//! `evaluate` a checkpoint on a trace, `experiment` from a config file, and
//! `analyze` closed-form rates from a stats CSV. Identical invocations with
//! identical seeds produce byte-identical output files.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rasim_core::activity::{gen_cmmpp, gen_synthetic, ingest_trace, ArrivalLog, SyntheticParams};
use rasim_core::agent::EnsembleAgent;
use rasim_core::harness::{
    analyze_ra, analyze_stats, evaluate_agent, run_experiment, train_agent, AgentSection,
    CellConfig, CmmppSection, ExperimentConfig,
};
use rasim_core::hybrid::{slot_results_csv, stats_from_csv, stats_to_csv, select_n1};
use rasim_core::ra::AnalyticMode;
use rasim_core::rng::RngStream;
use rasim_core::types::ActivityTrace;

#[derive(Parser)]
#[command(name = "rasim", version, about = "IoT cell resource-allocation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Synthetic,
    Cmmpp,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Verbatim,
    SimConsistent,
}

impl From<ModeArg> for AnalyticMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Verbatim => AnalyticMode::Verbatim,
            ModeArg::SimConsistent => AnalyticMode::SimConsistent,
        }
    }
}

#[derive(Args)]
struct CellArgs {
    /// Total resource blocks N.
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Prediction-stage blocks N1; omitted = choose via the analytic sweep.
    #[arg(long)]
    n1: Option<usize>,
    /// Orthonormal sequences M.
    #[arg(long, default_value_t = 54)]
    m: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Emit an activity trace CSV.
    Generate {
        #[arg(long, value_enum, default_value_t = SourceArg::Synthetic)]
        source: SourceArg,
        /// Number of nodes K.
        #[arg(long, default_value_t = 20)]
        k: usize,
        /// Number of slots T.
        #[arg(long, default_value_t = 1000)]
        t: usize,
        /// Determinism knob of the synthetic pattern.
        #[arg(long, default_value_t = 0.3)]
        delta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an agent on a trace and write a checkpoint.
    Train {
        /// Trace CSV produced by `generate`, or an arrival log with --arrivals.
        #[arg(long)]
        trace: PathBuf,
        /// Treat the input as an arrival log CSV and slot it first.
        #[arg(long)]
        arrivals: bool,
        /// Slot duration when slotting an arrival log.
        #[arg(long, default_value_t = 1.0)]
        slot_duration: f64,
        #[command(flatten)]
        cell: CellArgs,
        /// Fraction of slots to train on.
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rate a checkpoint on a trace; writes rate, stats and slot CSVs.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        arrivals: bool,
        #[arg(long, default_value_t = 1.0)]
        slot_duration: f64,
        #[command(flatten)]
        cell: CellArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Run a named experiment from a config file.
    Experiment {
        /// TOML config; defaults alone reproduce the evaluated setup.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form rates from a stats CSV.
    Analyze {
        /// Stats CSV (`slot,k_active,k_cor_active,k_mis_active,k_mis_inactive`).
        #[arg(long)]
        stats: PathBuf,
        /// Number of nodes K the stats were harvested from.
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        cell: CellArgs,
        #[arg(long, value_enum, default_value_t = ModeArg::SimConsistent)]
        mode: ModeArg,
        /// Also sweep every block split and report the best.
        #[arg(long)]
        sweep: bool,
        /// Output file (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(out: Option<&PathBuf>, contents: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
        }
        None => print!("{contents}"),
    }
    Ok(())
}

fn load_trace(path: &PathBuf, arrivals: bool, slot_duration: f64) -> anyhow::Result<ActivityTrace> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if arrivals {
        let log = ArrivalLog::from_csv(&text)?;
        let end = log.records.iter().map(|r| r.time_s).fold(0.0, f64::max) + slot_duration;
        Ok(ingest_trace(&log, slot_duration, (0.0, end))?)
    } else {
        Ok(ActivityTrace::from_csv(&text)?)
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate {
            source,
            k,
            t,
            delta,
            seed,
            out,
        } => {
            let mut rng = RngStream::new(seed);
            let trace = match source {
                SourceArg::Synthetic => gen_synthetic(
                    &SyntheticParams {
                        delta,
                        k_nodes: k,
                        t_slots: t,
                    },
                    &mut rng,
                )?,
                SourceArg::Cmmpp => gen_cmmpp(&CmmppSection::default().into(), k, t, &mut rng)?,
            };
            emit(out.as_ref(), &trace.to_csv())?;
        }
        Command::Train {
            trace,
            arrivals,
            slot_duration,
            cell,
            train_fraction,
            seed,
            out,
        } => {
            let trace = load_trace(&trace, arrivals, slot_duration)?;
            let cell = CellConfig {
                k: trace.k_nodes(),
                n: cell.n,
                m: cell.m,
                n1: cell.n1,
            };
            let (agent, rewards) =
                train_agent(&trace, &cell, &AgentSection::default(), train_fraction, seed)?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            let mut buf = Vec::new();
            agent.save_checkpoint(&mut buf)?;
            fs::write(&out, &buf).with_context(|| format!("writing {}", out.display()))?;
            let trained = rewards.len();
            let tail = rewards.iter().rev().take(trained.min(500));
            let late: f64 = tail.clone().sum::<f64>() / tail.len().max(1) as f64;
            eprintln!(
                "trained {trained} slots, late mean reward {late:.3}, checkpoint {}",
                out.display()
            );
        }
        Command::Evaluate {
            checkpoint,
            trace,
            arrivals,
            slot_duration,
            cell,
            seed,
            out,
        } => {
            let trace = load_trace(&trace, arrivals, slot_duration)?;
            let bytes = fs::read(&checkpoint)
                .with_context(|| format!("reading {}", checkpoint.display()))?;
            let mut agent =
                EnsembleAgent::load_checkpoint(&bytes[..], Default::default())?;
            if agent.k_nodes() != trace.k_nodes() {
                bail!(
                    "checkpoint is for {} nodes but the trace has {}",
                    agent.k_nodes(),
                    trace.k_nodes()
                );
            }
            let mut cell = CellConfig {
                k: trace.k_nodes(),
                n: cell.n,
                m: cell.m,
                n1: cell.n1,
            };
            let agent_cfg = AgentSection {
                t_h: agent.cfg.t_h,
                group_size: agent.cfg.group_size,
                hidden_width: agent.cfg.hidden_width,
                ..AgentSection::default()
            };
            if cell.n1.is_none() {
                // Pick the split from stats harvested on this trace.
                let probe = evaluate_agent(&mut agent.clone(), &trace, &CellConfig { n1: Some(cell.n / 2), ..cell }, &agent_cfg, seed)?;
                cell.n1 = Some(select_n1(&probe.stats, cell.n, cell.m, trace.k_nodes())?);
            }
            let eval = evaluate_agent(&mut agent, &trace, &cell, &agent_cfg, seed)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("hybrid_rates.csv"), eval.hybrid.to_csv())?;
            fs::write(out.join("ra_rates.csv"), eval.ra.to_csv())?;
            fs::write(out.join("genie_rates.csv"), eval.genie.to_csv())?;
            fs::write(out.join("stats.csv"), stats_to_csv(&eval.stats))?;
            let results: Vec<_> = eval
                .outcomes
                .iter()
                .zip(&eval.rewards)
                .map(|(o, &r)| rasim_core::hybrid::HybridSlotResult {
                    outcome: o.clone(),
                    windows: Vec::new(),
                    per_group: Vec::new(),
                    total_reward: r,
                    predicted: Default::default(),
                })
                .collect();
            fs::write(out.join("slots.csv"), slot_results_csv(&results))?;
            println!(
                "n1 {} hybrid {} ra {} genie {}",
                cell.n1.unwrap(),
                eval.hybrid.mean(),
                eval.ra.mean(),
                eval.genie.mean()
            );
        }
        Command::Experiment { config, seed, out } => {
            let mut cfg = match config {
                Some(path) => ExperimentConfig::from_path(&path)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if let Some(dir) = out {
                cfg.out_dir = dir;
            }
            let files = run_experiment(&cfg)?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Analyze {
            stats,
            k,
            cell,
            mode,
            sweep,
            out,
        } => {
            let text = fs::read_to_string(&stats)
                .with_context(|| format!("reading {}", stats.display()))?;
            let stats = stats_from_csv(&text)?;
            let cell = CellConfig {
                k,
                n: cell.n,
                m: cell.m,
                n1: cell.n1,
            };
            let counts: Vec<usize> = stats
                .iter()
                .map(|s| (s.k_cor_active + s.k_mis_inactive).round() as usize)
                .collect();
            let ra = analyze_ra(&counts, &cell, k, mode.into())?;
            let mut report = String::from("quantity,value\n");
            report.push_str(&format!("ra_rate,{}\n", ra.mean()));
            if sweep {
                for n1 in 0..=cell.n {
                    let h = analyze_stats(&stats, &cell, n1, k, mode.into())?;
                    report.push_str(&format!("hybrid_rate_n1_{n1},{}\n", h.mean()));
                }
                let best = select_n1(&stats, cell.n, cell.m, k)?;
                report.push_str(&format!("best_n1,{best}\n"));
            } else {
                let n1 = cell.n1.unwrap_or(cell.n / 2);
                let h = analyze_stats(&stats, &cell, n1, k, mode.into())?;
                report.push_str(&format!("hybrid_rate_n1_{n1},{}\n", h.mean()));
            }
            emit(out.as_ref(), &report)?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("rasim: {e}");
        std::process::exit(1);
    }
}
