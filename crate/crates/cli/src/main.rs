use std::path::PathBuf;
use std::process::ExitCode;

use adatoken_cli::commands::{cmd_analyze, cmd_bench, cmd_cost, cmd_fit, cmd_gen, cmd_simulate};
use adatoken_cli::{CliError, CliResult, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adatoken", version, about = "Layer-wise spatial token pruning toolkit")]
struct Cli {
    /// Print the default run configuration as JSON and exit.
    #[arg(long)]
    print_default_config: bool,
    /// Worker threads (overrides the config; 0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate planted scenes and write attention dumps plus ground truth.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer information statistics from a dump directory.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a retention schedule to a stats file.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        target_retention: Option<f64>,
        #[arg(long)]
        lambda_smooth: Option<f64>,
        /// Output schedule JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run pruned inference on generated scenes under a schedule.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy, carrier survival and FLOPs over a retention sweep.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Modeled FLOPs of vanilla decoding and the given schedules.
    Cost {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1..)]
        schedule: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(common: &Common, workers: Option<usize>) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.bench.seed = s;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    if cfg.workers > 0 {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.print_default_config {
        println!("{}", serde_json::to_string_pretty(&RunConfig::default()).expect("serializable"));
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Validation("no subcommand given (see --help)".into()));
    };
    match command {
        Command::Gen { common, out } => {
            let cfg = load(&common, cli.workers)?;
            cfg.validate()?;
            let gt = cmd_gen(&cfg, &out)?;
            println!("wrote {} scenes to {}", gt.scenes.len(), out.display());
        }
        Command::Analyze { common, dump, out } => {
            let cfg = load(&common, cli.workers)?;
            cfg.validate()?;
            let rows = cmd_analyze(&cfg, &dump, &out)?;
            println!("wrote {} layer rows to {}", rows.len(), out.display());
        }
        Command::Fit {
            common,
            stats,
            target_retention,
            lambda_smooth,
            out,
        } => {
            let mut cfg = load(&common, cli.workers)?;
            if let Some(g) = target_retention {
                cfg.fit.target_retention = g;
            }
            if let Some(l) = lambda_smooth {
                cfg.fit.lambda_smooth = l;
            }
            cfg.validate()?;
            let f = cmd_fit(&cfg, &stats, &out)?;
            println!(
                "achieved retention {:.6}, loss {:.6e}, wrote {}",
                f.schedule.achieved_retention,
                f.schedule.loss.unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Simulate {
            common,
            schedule,
            strategy,
            out,
        } => {
            let mut cfg = load(&common, cli.workers)?;
            if let Some(s) = strategy {
                cfg.strategy = s;
            }
            cfg.validate()?;
            let s = cmd_simulate(&cfg, &schedule, &out)?;
            println!(
                "{} scenes: accuracy {:.4}, carrier survival {:.4}",
                s.n_scenes, s.accuracy, s.carrier_survival
            );
        }
        Command::Bench { common, out } => {
            let cfg = load(&common, cli.workers)?;
            cfg.validate()?;
            let b = cmd_bench(&cfg, &out)?;
            println!("schedule,ranking,retention,accuracy,carrier_survival,reference_flops_reduction");
            for r in &b.rows {
                println!(
                    "{},{},{},{:.4},{:.4},{:.4}",
                    r.schedule, r.ranking, r.target_retention, r.accuracy, r.carrier_survival, r.reference_flops_reduction
                );
            }
        }
        Command::Cost { common, schedule, out } => {
            let cfg = load(&common, cli.workers)?;
            cfg.validate()?;
            for r in cmd_cost(&cfg, &schedule, &out)? {
                println!("{}: {:.4e} FLOPs, reduction {:.4}", r.strategy, r.total_flops, r.reduction);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
