use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use robnoddi_cli::commands::{cmd_ablate, cmd_eval, cmd_phantom, cmd_train, Method, Mode};
use robnoddi_cli::config::{parse_grid, ExperimentConfig};
use robnoddi_cli::report::cmd_report;
use robnoddi_cli::exit_code;
use robnoddi_core::exec::configure_threads;
use robnoddi_core::{Error, Exec};

#[derive(Parser)]
#[command(name = "robnoddi", version, about = "NODDI estimation experiments on synthetic phantoms")]
struct Cli {
    /// Maximum worker threads (1 runs everything sequentially).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// key=value experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset.
    Phantom(Common),
    /// Train one method.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: String,
    },
    /// Evaluate a trained method under SS or RS sampling.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: String,
        #[arg(long, default_value = "ss")]
        mode: String,
        #[arg(long)]
        s1: Option<usize>,
        #[arg(long)]
        s2: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// RS evaluation over a grid of direction counts.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: String,
        /// Comma-separated s1/s2 pairs, e.g. 20/20,16/29.
        #[arg(long)]
        grid: Option<String>,
        /// Comma-separated RS seeds.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
    },
    /// Write report.md and figures from existing results.
    Report(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let exec = match cli.threads {
        Some(1) => Exec::Sequential,
        Some(n) => {
            configure_threads(n)?;
            Exec::Parallel
        }
        None => Exec::default(),
    };
    match cli.command {
        Command::Phantom(c) => {
            let cfg = load(&c)?;
            let m = cmd_phantom(&cfg, exec)?;
            println!("wrote {} volumes to {}", m.volumes.len(), cfg.output_dir.join("data").display());
        }
        Command::Train { common, method } => {
            let cfg = load(&common)?;
            let method = Method::parse(&method)?;
            let out = cmd_train(&cfg, method, exec)?;
            for (e, l) in out.log.epoch_loss.iter().enumerate() {
                println!("epoch {e:3} loss {l:.6e}");
            }
            if let Some(v) = out.val_loss {
                println!("validation loss (ss) {v:.6e}");
            }
        }
        Command::Eval { common, method, mode, s1, s2, seed } => {
            let cfg = load(&common)?;
            let out = cmd_eval(
                &cfg,
                Method::parse(&method)?,
                Mode::parse(&mode)?,
                s1.unwrap_or(cfg.eval.s1),
                s2.unwrap_or(cfg.eval.s2),
                seed.unwrap_or(cfg.eval.rs_seeds[0]),
                exec,
            )?;
            println!("{}", robnoddi_core::metrics::CSV_HEADER);
            println!("{}", out.row.to_line());
        }
        Command::Ablate { common, method, grid, seed } => {
            let cfg = load(&common)?;
            let grid = match grid {
                Some(g) => parse_grid(&g)?,
                None => cfg.eval.grid.clone(),
            };
            let seeds = if seed.is_empty() { cfg.eval.rs_seeds.clone() } else { seed };
            let out = cmd_ablate(&cfg, Method::parse(&method)?, &grid, &seeds, exec)?;
            println!("{}", robnoddi_core::metrics::CSV_HEADER);
            for r in &out.rows {
                println!("{}", r.to_line());
            }
            println!("monotone: {}", out.monotone);
        }
        Command::Report(c) => {
            let cfg = load(&c)?;
            let out = cmd_report(&cfg.output_dir)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {}", out.path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
