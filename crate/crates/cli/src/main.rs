//! `perflaw`: dataset entropy, law fitting and model sizing from the
//! command line.

mod args;
mod config;
mod data;
mod model;
mod report;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command, FitCommand, SynthCommand};
use config::PipelineConfig;
use report::{CmdResult, Failure};

fn dispatch(cmd: &Command, cfg: &PipelineConfig) -> CmdResult {
    match cmd {
        Command::Stats(a) => data::stats(a, cfg),
        Command::Apen(a) => data::apen(a, cfg),
        Command::VerifyBound(a) => data::verify_bound(a, cfg),
        Command::Fit(FitCommand::Loss(a)) => model::fit_loss(a, cfg),
        Command::Fit(FitCommand::Perf(a)) => model::fit_perf(a, cfg),
        Command::Optimize(a) => model::optimize(a, cfg),
        Command::Synth(SynthCommand::Markov(a)) => data::synth_markov(a, cfg),
        Command::Synth(SynthCommand::Runs(a)) => model::synth_runs(a, cfg),
        Command::Potential(a) => model::potential(a, cfg),
    }
}

fn run() -> Result<(), Failure> {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap exits 2 on bad usage by default; our contract says 1
            let _ = e.print();
            return if e.use_stderr() {
                Err(Failure::Usage(String::new()))
            } else {
                Ok(())
            };
        }
    };
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(n) = cli.threads.map(|t| t as usize).or(cfg.threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    }
    let format = cli.output.or(cfg.output).unwrap_or_default();
    let report = dispatch(&cli.command, &cfg)?;
    let mut out = std::io::stdout().lock();
    out.write_all(report.render(format).as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Failure::Io(format!("stdout: {e}")))
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = f.to_string();
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            ExitCode::from(f.code() as u8)
        }
    }
}
