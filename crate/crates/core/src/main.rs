use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cidetect::cli::{self, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "cidetect", version, about = "Consensus+innovations distributed detection experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Bounds and exact-moment rate trajectories.
    Analyze(RunArgs),
    /// Monte Carlo error rates and empirical moments.
    Simulate(RunArgs),
    /// Bounds and exact rate over a grid of gains b0.
    SweepB0(RunArgs),
    /// Consensus+innovations against the mixed-time-scale detector.
    CompareMd(RunArgs),
    /// Communication payoff verdict.
    Payoff(RunArgs),
    /// Re-derive the hashes recorded in an output directory's manifest.
    VerifyManifest { dir: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Horizon K.
    #[arg(long)]
    iters: Option<usize>,
}

fn load(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = args.trials {
        cfg.trials = m;
    }
    if let Some(k) = args.iters {
        cfg.k = k;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set `out`".into()))?;
    Ok((cfg, out))
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    let (f, args): (fn(&ExperimentConfig, &std::path::Path) -> Result<cli::Outcome, CliError>, RunArgs) = match cmd {
        Cmd::Analyze(a) => (cli::cmd_analyze, a),
        Cmd::Simulate(a) => {
            let (cfg, out) = load(&a)?;
            let o = cli::cmd_simulate(&cfg, &out, cli::threads_from_env())?;
            report(&o, &out);
            return Ok(());
        }
        Cmd::SweepB0(a) => (cli::cmd_sweep_b0, a),
        Cmd::CompareMd(a) => (cli::cmd_compare_md, a),
        Cmd::Payoff(a) => (cli::cmd_payoff, a),
        Cmd::VerifyManifest { dir } => {
            let c = cli::verify_manifest(&dir)?;
            if c.ok() {
                println!("manifest ok");
                return Ok(());
            }
            if !c.config_ok {
                eprintln!("config hash mismatch");
            }
            for f in &c.modified {
                eprintln!("modified: {f}");
            }
            return Err(CliError::Config("manifest check failed".into()));
        }
    };
    let (cfg, out) = load(&args)?;
    let o = f(&cfg, &out)?;
    report(&o, &out);
    Ok(())
}

fn report(o: &cli::Outcome, out: &std::path::Path) {
    // a closed stdout is not an error worth dying over
    let mut w = std::io::stdout().lock();
    let _ = writeln!(w, "{}", o.summary);
    for a in &o.artifacts {
        let _ = writeln!(w, "wrote {}", out.join(a).display());
    }
}

fn main() -> ExitCode {
    let parsed = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(parsed.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
