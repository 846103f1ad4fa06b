use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hpim_cli::{cmd_run, cmd_sweep, cmd_validate, emit, sweep_csv, CliError, CliResult, RunSpec, SweepGrid};

#[derive(Parser)]
#[command(name = "hpim", version, about = "LLM inference performance model for SRAM-PIM + HBM-PIM machines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one request and write a latency report.
    Run {
        /// Model preset name or JSON path.
        #[arg(long)]
        model: String,
        /// Hardware preset name or JSON path.
        #[arg(long, default_value = "hpim-default")]
        hw: String,
        /// Prompt length.
        #[arg(long = "in")]
        len_in: u64,
        /// Generated tokens.
        #[arg(long = "out")]
        len_out: u64,
        /// Baseline device for the speedup block (e.g. `a100`).
        #[arg(long)]
        baseline: Option<String>,
        /// Report JSON path; printed to stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Chrome trace JSON path.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Decode tokens included in the trace.
        #[arg(long, default_value_t = 2)]
        trace_tokens: u64,
        /// Per-class breakdown CSV path.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Cost-model overrides: inline JSON object or file.
        #[arg(long)]
        params: Option<String>,
    },
    /// Run a grid of models and lengths and write one CSV row per point.
    Sweep {
        /// Comma-separated model presets or paths.
        #[arg(long, value_delimiter = ',', required = true)]
        model: Vec<String>,
        #[arg(long, default_value = "hpim-default")]
        hw: String,
        /// Comma-separated prompt lengths, paired with --out.
        #[arg(long = "in", value_delimiter = ',', required = true)]
        len_in: Vec<u64>,
        /// Comma-separated output lengths, paired with --in.
        #[arg(long = "out", value_delimiter = ',', required = true)]
        len_out: Vec<u64>,
        #[arg(long)]
        baseline: Option<String>,
        /// CSV path; printed to stdout when omitted.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        params: Option<String>,
        /// Concurrent runs (defaults to the number of CPUs).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Print derived peak metrics of a hardware config.
    Validate {
        #[arg(long, default_value = "hpim-default")]
        hw: String,
    },
}

fn pair_lengths(ins: &[u64], outs: &[u64]) -> CliResult<Vec<(u64, u64)>> {
    match (ins.len(), outs.len()) {
        (a, b) if a == b => Ok(ins.iter().copied().zip(outs.iter().copied()).collect()),
        (1, _) => Ok(outs.iter().map(|&o| (ins[0], o)).collect()),
        (_, 1) => Ok(ins.iter().map(|&i| (i, outs[0])).collect()),
        (a, b) => Err(CliError::Parse(format!("--in has {a} values but --out has {b}"))),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run {
            model,
            hw,
            len_in,
            len_out,
            baseline,
            report,
            trace,
            trace_tokens,
            csv,
            params,
        } => {
            let spec = RunSpec {
                baseline,
                params,
                report,
                trace,
                csv,
                trace_tokens,
                ..RunSpec::new(&model, &hw, len_in, len_out)
            };
            let out = cmd_run(&spec)?;
            if spec.report.is_none() {
                emit(None, &out.report_json)?;
            }
            Ok(())
        }
        Command::Sweep {
            model,
            hw,
            len_in,
            len_out,
            baseline,
            csv,
            params,
            jobs,
        } => {
            let grid = SweepGrid {
                models: model,
                hw,
                lengths: pair_lengths(&len_in, &len_out)?,
                baseline,
                params,
            };
            let rows = cmd_sweep(&grid, jobs)?;
            emit(csv.as_deref(), &sweep_csv(&rows)?)
        }
        Command::Validate { hw } => {
            let (text, ok) = cmd_validate(&hw)?;
            emit(None, &text)?;
            if !ok {
                eprintln!("one or more derived metrics differ from the reference values");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hpim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
