use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedtune::experiment::{cmd_compare, cmd_gen_data, cmd_report, cmd_run, ExperimentConfig};
use fedtune::{Error, Result};

#[derive(Parser)]
#[command(name = "fedtune", version, about = "Federated fine-tuning experiments on synthetic cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic federation as feature files and a manifest.
    GenData,
    /// Train and evaluate every sweep point.
    Run,
    /// Summarise the runs under a results directory.
    Report {
        /// Defaults to --out.
        dir: Option<PathBuf>,
    },
    /// Compare two run directories scope by scope.
    Compare { a: PathBuf, b: PathBuf },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(cli)?;
            let m = cmd_gen_data(&cfg, &cfg.out_dir)?;
            println!("wrote {} clients to {}", m.clients.len(), cfg.out_dir.display());
        }
        Command::Run => {
            let cfg = load_config(cli)?;
            for run in cmd_run(&cfg, &cfg.out_dir)? {
                if let Some(all) = run.results.iter().find(|r| r.scope == "All") {
                    println!("{:<40} AUC {:.4} [{:.4}-{:.4}]", run.name, all.auc, all.ci_low, all.ci_high);
                }
            }
        }
        Command::Report { dir } => {
            let dir = match (dir, &cli.out) {
                (Some(d), _) | (None, Some(d)) => d.clone(),
                (None, None) => load_config(cli)?.out_dir,
            };
            let report = cmd_report(&dir)?;
            print!("{}", report.summary_csv());
            for p in &report.significant {
                println!("significant: {} vs {} ({})", p.a, p.b, p.scope);
            }
        }
        Command::Compare { a, b } => print!("{}", cmd_compare(a, b)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
