//! `refattn`: demo forwards, gate export, gradient checks, cost reports
//! and benchmarks for gated reference attention.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or config error,
//! 3 I/O error.

mod cmd;
mod error;
mod output;
mod settings;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use refattn::AttnConfig;

use cmd::bench::BenchArgs;
use cmd::flops::FlopsArgs;
use cmd::gate_export::GateExportArgs;
use cmd::gradcheck::GradcheckArgs;
use error::CliResult;
use settings::{CommonArgs, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "refattn",
    version,
    about = "Gated reference attention experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every gating mode on one seeded problem and summarize outputs, gates and MACs.
    Demo(DemoArgs),
    /// Write the per-token gate as CSV, plus a grayscale PGM when L-src is square.
    GateExport(GateExportArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Closed-form MAC counts and overheads of the gating modes.
    Flops(FlopsArgs),
    /// Time every gating mode over a ladder of sequence lengths.
    Bench(BenchArgs),
}

fn dispatch(command: &Command) -> CliResult<()> {
    let defaults = AttnConfig::default();
    match command {
        Command::Demo(a) => cmd::demo::run(&RunConfig::resolve(&a.common, defaults)?),
        Command::GateExport(a) => {
            cmd::gate_export::run(a, &RunConfig::resolve(&a.common, defaults)?)
        }
        Command::Gradcheck(a) => cmd::gradcheck::run(a, &RunConfig::resolve(&a.common, defaults)?),
        Command::Flops(a) => cmd::flops::run(a, &RunConfig::resolve(&a.common, defaults)?),
        Command::Bench(a) => {
            cmd::bench::run(a, &RunConfig::resolve(&a.common, cmd::bench::defaults())?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
