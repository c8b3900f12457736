use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rsdflow_harness::error::{HarnessError, Result};
use rsdflow_harness::presets::{run_preset, Preset, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "rsdflow", version, about = "Online optical flow experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a preset and write report.json, flows/ and masks/.
    Run {
        /// fig3-race, flow-sanity, optimizer-sweep, integration-demo or stream-vs-batch
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Synthetic frame size, e.g. 64x64.
        #[arg(long, default_value = "64x64", value_parser = parse_size)]
        size: (usize, usize),
        /// Batched update interval.
        #[arg(long)]
        interval: Option<usize>,
        /// Optimizer iterations per update.
        #[arg(long)]
        iters: Option<usize>,
        /// Integration history depth (0, 1 or 2).
        #[arg(long)]
        history: Option<usize>,
        /// Output directory; defaults to rsdflow-out/<preset>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sequence directory with frames/ and masks/ (flow-sanity only).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        lambda_l1: Option<f64>,
        #[arg(long)]
        lambda_ssim: Option<f64>,
        /// Use the SSIM term with its sign exactly as first written.
        #[arg(long)]
        literal_eq4: bool,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got '{s}'"))?;
    let dim = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad size '{s}': {e}"));
    Ok((dim(h)?, dim(w)?))
}

fn fail(kind: &str, message: &str) -> ExitCode {
    let err = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{err}");
    ExitCode::from(if kind == "usage" { 2 } else { 1 })
}

fn execute(cli: Cli) -> Result<()> {
    let Command::Run {
        preset,
        seed,
        size,
        interval,
        iters,
        history,
        out,
        input,
        lambda_l1,
        lambda_ssim,
        literal_eq4,
    } = cli.command;
    let preset: Preset = preset.parse()?;
    if input.is_some() && preset != Preset::FlowSanity {
        return Err(HarnessError::Usage("--input is only used by flow-sanity".into()));
    }
    let opts = RunOptions {
        seed,
        size,
        interval,
        iterations: iters,
        history,
        input,
        lambda_l1,
        lambda_ssim,
        literal_eq4,
    };
    let output = run_preset(preset, &opts)?;
    let dir = out.unwrap_or_else(|| PathBuf::from("rsdflow-out").join(preset.name()));
    output.write(&dir)?;
    println!("{}", output.report.to_json()?);
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim()),
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
