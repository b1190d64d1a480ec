use bubbleflow::cli;
use bubbleflow::config::RunConfig;
use bubbleflow::metric::ProfileMode;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Coupled map/metric gradient-flow laboratory on the flat torus.
#[derive(Parser)]
#[command(name = "bubbleflow", version, about)]
struct Cli {
    /// JSON config file; defaults are used when absent
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// RNG seed (overrides the config)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 = all cores. Env BUBBLEFLOW_THREADS is the fallback.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Constant profile: paper or desk (overrides the config)
    #[arg(long, global = true)]
    profile: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Grid-free property suite for the metric family at reference constants
    MetricsAudit,
    /// Full pipeline for one initial datum: concentrate, flow, audit
    FlowRun {
        /// continue from a checkpoint file instead of initialising
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Scale-ladder runs with slope regressions
    Sweep,
    /// Bubble-model suite: defect/far-field scaling, degree, tail checks
    BubbleAudit,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, bubbleflow::BubbleflowError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    } else if let Ok(v) = std::env::var("BUBBLEFLOW_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            cfg.threads = n;
        }
    }
    if let Some(p) = &cli.profile {
        cfg.profile.mode = match p.as_str() {
            "paper" => ProfileMode::Paper,
            "desk" => ProfileMode::Desk,
            other => {
                return Err(bubbleflow::BubbleflowError::Config(format!(
                    "unknown profile {other:?} (expected paper or desk)"
                )))
            }
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(cli::EXIT_PRECONDITION as u8);
        }
    };
    if cfg.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    let result = match &cli.command {
        Command::MetricsAudit => cli::cmd_metrics_audit(&cfg),
        Command::FlowRun { resume } => cli::cmd_flow_run(&cfg, resume.as_deref()),
        Command::Sweep => cli::cmd_sweep(&cfg),
        Command::BubbleAudit => cli::cmd_bubble_audit(&cfg),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::EXIT_INVARIANT as u8)
        }
    }
}
