//! Config-driven pipeline commands behind the `vtrack` binary.

pub mod config;
pub mod error;
pub mod metrics;
pub mod run;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use config::RunConfig;
use run::{override_path, Network, Outcome};

#[derive(Debug, Parser)]
#[command(name = "vtrack", version, about = "Globally-controlled vessel tracking and surface reconstruction")]
pub struct Cli {
    /// Run config JSON; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// RNG seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NetworkArg {
    Orient,
    Contour,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom volume, controller masks and truth.
    Phantom {
        /// Phantom spec JSON, or `three_vessel`.
        #[arg(long)]
        spec: Option<String>,
    },
    /// Train the orientation or contour network.
    Train {
        network: NetworkArg,
        /// Dataset manifest; synthesized from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Also write the synthesized dataset under the output directory.
        #[arg(long)]
        save_dataset: bool,
    },
    /// Resolve the controller and track every vessel.
    Track {
        #[arg(long)]
        volume: Option<PathBuf>,
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Fit per-vessel fields, blend and mesh.
    Reconstruct {
        #[arg(long)]
        tracks: Option<PathBuf>,
    },
    /// Score tracks and/or a mesh against the truth.
    Evaluate {
        #[arg(long)]
        tracks: Option<PathBuf>,
        #[arg(long)]
        mesh: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

/// Loads the config, applies flag overrides and runs the command.
pub fn execute(cli: Cli) -> Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let paths = &mut cfg.paths;
    match &cli.command {
        Command::Phantom { spec: Some(s) } => {
            cfg.phantom = if s == config::BUILTIN_PHANTOM {
                config::PhantomSource::Named(s.clone())
            } else {
                config::PhantomSource::Named(std::env::current_dir()?.join(s).to_string_lossy().into_owned())
            };
        }
        Command::Track { volume, masks } => {
            override_path(&mut paths.volume, volume.clone())?;
            override_path(&mut paths.masks, masks.clone())?;
        }
        Command::Reconstruct { tracks } => override_path(&mut paths.tracks, tracks.clone())?,
        Command::Evaluate { tracks, mesh, truth } => {
            override_path(&mut paths.tracks, tracks.clone())?;
            override_path(&mut paths.mesh, mesh.clone())?;
            override_path(&mut paths.truth, truth.clone())?;
        }
        _ => {}
    }
    let r = cfg.resolve(cli.config.as_deref(), cli.seed, &cli.out)?;
    match cli.command {
        Command::Phantom { .. } => run::phantom(&r),
        Command::Train { network, dataset, save_dataset } => {
            let net = match network {
                NetworkArg::Orient => Network::Orientation,
                NetworkArg::Contour => Network::Contour,
            };
            let dataset = dataset.map(|d| std::env::current_dir().map(|c| c.join(d))).transpose()?;
            run::train(&r, net, dataset.as_deref(), save_dataset)
        }
        Command::Track { .. } => run::track(&r),
        Command::Reconstruct { .. } => run::reconstruct(&r),
        Command::Evaluate { .. } => run::evaluate_cmd(&r),
    }
}
