//! Command-line front end: argument parsing and dispatch.

pub mod commands;
pub mod settings;

use clap::{CommandFactory, Parser, Subcommand};
use cpa_core::PipelineError;
use settings::{Opts, Settings};

type CmdFn = fn(&Settings) -> Result<(), PipelineError>;

#[derive(Parser, Debug)]
#[command(
    name = "cpa",
    about = "Pyramid-attention segmentation for aerial rasters",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Synthesize the aerial-scene dataset under --data-root.
    GenData {
        #[command(flatten)]
        opts: Opts,
    },
    /// Train a model and write checkpoint, loss curve, and metrics to --out.
    Train {
        #[command(flatten)]
        opts: Opts,
    },
    /// Score a trained checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        opts: Opts,
    },
    /// Segment one raster by tiling, stitch, and write the mask.
    Infer {
        #[command(flatten)]
        opts: Opts,
    },
    /// Train baseline, +SA, and +CPA under one recipe and tabulate them.
    Ablate {
        #[command(flatten)]
        opts: Opts,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        opts: Opts,
    },
    /// Export attention affinity maps as grayscale rasters.
    AttnExport {
        #[command(flatten)]
        opts: Opts,
    },
    /// Time tiled inference on a large synthetic raster.
    Bench {
        #[command(flatten)]
        opts: Opts,
    },
}

/// Parse `argv` and run the selected command, returning a process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let (opts, run): (Opts, CmdFn) = match cli.cmd {
        Cmd::GenData { opts } => (opts, commands::gen_data as _),
        Cmd::Train { opts } => (opts, commands::train as _),
        Cmd::Eval { opts } => (opts, commands::eval as _),
        Cmd::Infer { opts } => (opts, commands::infer as _),
        Cmd::Ablate { opts } => (opts, commands::ablate as _),
        Cmd::Gradcheck { opts } => (opts, commands::gradcheck as _),
        Cmd::AttnExport { opts } => (opts, commands::attn_export as _),
        Cmd::Bench { opts } => (opts, commands::bench as _),
    };
    let settings = match settings::resolve(&opts) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match run(&settings) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Subcommand argument definitions, for tests that audit the flag surface.
pub fn subcommand_args(name: &str) -> Vec<String> {
    let cli = Cli::command();
    let sub = cli
        .get_subcommands()
        .find(|c| c.get_name() == name)
        .unwrap_or_else(|| panic!("no subcommand {name}"));
    sub.get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .collect()
}
