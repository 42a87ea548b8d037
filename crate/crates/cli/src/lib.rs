//! `panocolor` command-line front end: argument parsing, config loading,
//! exit-code mapping and the four pipeline commands.

use std::path::PathBuf;

use clap::{ArgAction, Parser, Subcommand};
use panocolor::config::PipelineConfig;
use panocolor::Error;

pub mod pipeline;

#[derive(Debug, Parser)]
#[command(
    name = "panocolor",
    version,
    about = "Colorize LiDAR point clouds from 360-degree panoramas"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Key-value configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Worker threads; 1 gives the deterministic single-threaded mode.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// More log output on stderr (-v info, -vv debug, -vvv trace).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    pub show_config: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Sync, visibility, pose refinement and final colorization.
    Colorize,
    /// Pose refinement only.
    Optimize,
    /// Write a synthetic sphere dataset.
    Simulate,
    /// Compare an estimated trajectory with ground truth; optionally run the ablation.
    Evaluate,
}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_PIPELINE: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Parse { .. } | Error::ImageDecode { .. } | Error::UnsupportedProperty { .. } => {
            EXIT_IO
        }
        _ => EXIT_PIPELINE,
    }
}

pub fn load_config(cli: &Cli) -> panocolor::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => match PipelineConfig::load(path) {
            Err(Error::Io { path, source }) => {
                return Err(Error::Config(format!(
                    "cannot read config {}: {source}",
                    path.display()
                )))
            }
            other => other?,
        },
        None => PipelineConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
}

/// Runs one command and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    init_logging(cli.verbose);
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    if cli.show_config {
        print!("{}", cfg.to_text());
        return 0;
    }
    let result = match cli.command {
        Command::Colorize => pipeline::cmd_colorize(&cfg),
        Command::Optimize => pipeline::cmd_optimize(&cfg),
        Command::Simulate => pipeline::cmd_simulate(&cfg),
        Command::Evaluate => pipeline::cmd_evaluate(&cfg),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
