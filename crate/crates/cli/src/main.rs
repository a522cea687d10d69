//! `lsdf` command-line tool.
//!
//! Exit codes: 0 success, 1 case violations, 2 missing or malformed input,
//! 3 power flow non-convergence, 4 numerical failure.

mod commands;
mod options;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lsdf::acpf::AcpfError;
use lsdf::case::CaseError;
use lsdf::evaluation::EvalError;
use lsdf::lsdf::LsdfError;
use lsdf::ptdf::PtdfError;
use lsdf::sampling::SamplingError;

use options::{CaseArg, ConvergeArgs, FitArgs, EvaluateArgs, CompareArgs, SampleArgs, PtdfArgs};

#[derive(Parser)]
#[command(name = "lsdf", version, about = "Least-squares distribution factors for AC branch flows")]
struct Cli {
    /// Worker threads for sampling, fitting and evaluation (results do not depend on it).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a case and check it for structural problems.
    Validate(CaseArg),
    /// Solve the AC power flow at nominal load.
    Pf(CaseArg),
    /// Draw load scenarios and solve each one.
    Sample(SampleArgs),
    /// Compute DC power transfer distribution factors.
    Ptdf(PtdfArgs),
    /// Fit distribution factors from a sample file.
    Fit(FitArgs),
    /// Score a factor file (or the PTDF) on a sample file.
    Evaluate(EvaluateArgs),
    /// Sample, fit, and compare against the PTDF end to end.
    Compare(CompareArgs),
    /// Track how the fit settles as the sample count grows.
    Converge(ConvergeArgs),
}

/// Failure with a fixed exit status.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

pub fn exit(code: u8, message: impl Into<String>) -> anyhow::Error {
    Exit { code, message: message.into() }.into()
}

fn acpf_code(e: &AcpfError) -> u8 {
    match e {
        AcpfError::ZeroReactance { .. } | AcpfError::NoSlack | AcpfError::Dimension { .. } => 2,
        AcpfError::SingularJacobian { .. } => 4,
    }
}

fn sampling_code(e: &SamplingError) -> u8 {
    match e {
        SamplingError::RejectionRate { .. } | SamplingError::Exhausted { .. } => 3,
        SamplingError::Solver(e) => acpf_code(e),
        _ => 2,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if cause.downcast_ref::<CaseError>().is_some() || cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<AcpfError>() {
            return acpf_code(e);
        }
        if let Some(e) = cause.downcast_ref::<SamplingError>() {
            return sampling_code(e);
        }
        if let Some(e) = cause.downcast_ref::<PtdfError>() {
            return match e {
                PtdfError::Singular => 4,
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<LsdfError>() {
            return match e {
                LsdfError::Format(_) | LsdfError::Io(_) | LsdfError::NoSamples => 2,
                LsdfError::Dimension { .. } => 4,
            };
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return match e {
                EvalError::Sampling(e) => sampling_code(e),
                EvalError::Ptdf(PtdfError::Singular) => 4,
                EvalError::Lsdf(LsdfError::Dimension { .. }) => 4,
                _ => 2,
            };
        }
    }
    4
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global()?;
    }
    match cli.command {
        Command::Validate(a) => commands::validate(&a),
        Command::Pf(a) => commands::power_flow(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Ptdf(a) => commands::ptdf(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Converge(a) => commands::converge(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
