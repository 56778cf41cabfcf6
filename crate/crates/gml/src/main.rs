//! Thin CLI over the library: `gen-data`, `run`, and `compare`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gml::config::config_load;
use gml::runner::{cmd_compare, cmd_gen_data, cmd_run, Method};
use gml::Result;

#[derive(Parser)]
#[command(name = "gml", version, about = "Deterministic gossip mutual learning simulator")]
struct Cli {
    /// Log verbosity on stderr.
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Info)]
    log_level: LogLevel,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LogLevel {
    Info,
    Debug,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate all per-site datasets and write them under OUT/data/.
    GenData {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method end to end and write all artifacts under OUT/METHOD/.
    Run {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Training strategy.
        #[arg(long, value_enum)]
        method: Method,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print comparison tables over two or more completed run directories.
    Compare {
        /// Directories previously passed to `run --out`.
        #[arg(required = true, num_args = 1..)]
        dirs: Vec<PathBuf>,
    },
}

fn exec(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { config, out } => {
            let cfg = config_load(&config)?;
            cmd_gen_data(&cfg, &out)?;
        }
        Cmd::Run {
            config,
            method,
            seed,
            out,
        } => {
            let mut cfg = config_load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cmd_run(&cfg, method, &out)?;
        }
        Cmd::Compare { dirs } => {
            print!("{}", cmd_compare(&dirs)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(match cli.log_level {
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
        })
        .init();
    match exec(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
