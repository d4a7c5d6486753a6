use clap::{Args, Parser, Subcommand};
use mixlap::driver::{emit_outputs, run, ExperimentConfig, ExperimentKind, Format};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mixlap", version, about = "Mixed local-nonlocal p-Laplacian experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output prefix; defaults to the configuration's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// λ*, λ**, λ#, r0 and δ0 from the bubble estimate of S.
    Thresholds(Common),
    /// Runs whatever experiment the configuration names.
    Solve(Common),
    /// Minimal-solution branch and Λ bracket.
    Branch(Common),
    /// Minimizer, energy-estimate scan and mountain-pass solution.
    TwoSolution(Common),
    /// Descent from random starts for λ ≤ 0.
    Nonexistence(Common),
    /// Scaling ratios and the one-sided derivative bound.
    Scaling(Common),
    /// β_k and ρ_k diagnostics.
    BetaSeq(Common),
    /// Interior floors across ε.
    Harnack(Common),
    /// Bubble constants and norm asymptotics.
    Bubbles(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, common) = match cli.command {
        Command::Thresholds(c) => (Some(ExperimentKind::Thresholds), c),
        Command::Solve(c) => (None, c),
        Command::Branch(c) => (Some(ExperimentKind::Branch), c),
        Command::TwoSolution(c) => (Some(ExperimentKind::TwoSolution), c),
        Command::Nonexistence(c) => (Some(ExperimentKind::Nonexistence), c),
        Command::Scaling(c) => (Some(ExperimentKind::Scaling), c),
        Command::BetaSeq(c) => (Some(ExperimentKind::BetaSeq), c),
        Command::Harnack(c) => (Some(ExperimentKind::Harnack), c),
        Command::Bubbles(c) => (Some(ExperimentKind::Bubbles), c),
    };
    let text = match std::fs::read_to_string(&common.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", common.config.display());
            return ExitCode::from(4);
        }
    };
    let mut cfg = match ExperimentConfig::from_json(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    if let Some(k) = kind {
        cfg.experiment = k;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.to_string_lossy().into_owned();
    }
    let report = match run(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    let prefix = PathBuf::from(&cfg.out);
    for format in [Format::Json, Format::Csv] {
        if let Err(e) = emit_outputs(&report, &prefix, format) {
            eprintln!("{e}");
            return ExitCode::from(4);
        }
    }
    for v in &report.verdicts {
        println!("{:<36} {:<12} {}", v.name, format!("{:?}", v.status).to_lowercase(), v.detail);
    }
    ExitCode::from(report.exit_code() as u8)
}
