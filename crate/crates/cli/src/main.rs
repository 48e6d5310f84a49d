// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use kloc::model::Site;
use kloc::trace::{parse_site, Sever};
use kloc::world::Perspective;
use kloc_cli::{exit_code, ExperimentConfig, Lab, OutDir};

#[derive(Parser)]
#[command(
    name = "kloc",
    version,
    about = "Knowledge localization lab: trace and edit facts in a toy transformer"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, env = "KLOC_OUT", default_value = "kloc-out")]
    out: PathBuf,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Args)]
struct Selection {
    /// Corruption or edit perspective; both when omitted.
    #[arg(long, value_parser = parse_perspective)]
    perspective: Option<Perspective>,
    /// Restored site; all three (trace) or hidden (sever-trace) when omitted.
    #[arg(long, value_parser = parse_site_arg)]
    site: Option<Site>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic fact world.
    GenWorld,
    /// Train the base model; exits 2 below the recall gate.
    Train,
    /// Causal tracing AIE grids; exits 2 when corruption is ineffective.
    Trace(Selection),
    /// Tracing with an MLP or attention module frozen to corrupted values.
    SeverTrace {
        #[command(flatten)]
        selection: Selection,
        /// Severed module; mlp and attn when omitted.
        #[arg(long, value_parser = parse_sever)]
        sever: Option<Sever>,
    },
    /// Single-fact edits and the fine-tuning baseline; exits 2 below the
    /// edit success gate.
    Edit {
        #[arg(long, value_parser = parse_perspective)]
        perspective: Option<Perspective>,
    },
    /// Reliability and generality of the edits through both families.
    Eval,
    /// Heatmaps and summary.
    Report,
    /// Every stage in order.
    Run,
    /// Print the effective configuration as JSON.
    ShowConfig,
}

fn parse_perspective(s: &str) -> Result<Perspective, String> {
    s.parse().map_err(|e: kloc::Error| e.to_string())
}

fn parse_site_arg(s: &str) -> Result<Site, String> {
    parse_site(s).map_err(|e| e.to_string())
}

fn parse_sever(s: &str) -> Result<Sever, String> {
    s.parse().map_err(|e: kloc::Error| e.to_string())
}

fn perspectives(p: Option<Perspective>) -> Vec<Perspective> {
    p.map_or_else(|| Perspective::BOTH.to_vec(), |p| vec![p])
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    if let Command::ShowConfig = cli.command {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let mut lab = Lab::new(cfg, OutDir::new(&cli.common.out)?);
    lab.verbose = !cli.common.quiet;
    match cli.command {
        Command::GenWorld => lab.gen_world(),
        Command::Train => lab.train(),
        Command::Trace(sel) => {
            let sites = sel.site.map_or_else(
                || vec![Site::Hidden, Site::MlpOut, Site::AttnOut],
                |s| vec![s],
            );
            lab.trace(&perspectives(sel.perspective), &sites)
        }
        Command::SeverTrace { selection, sever } => {
            let severs = sever.map_or_else(|| vec![Sever::Mlp, Sever::Attn], |s| vec![s]);
            lab.sever_trace(
                &perspectives(selection.perspective),
                &[selection.site.unwrap_or(Site::Hidden)],
                &severs,
            )
        }
        Command::Edit { perspective } => lab.edit(&perspectives(perspective)),
        Command::Eval => lab.eval(),
        Command::Report => lab.report(),
        Command::Run => lab.run_all(),
        Command::ShowConfig => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kloc: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
