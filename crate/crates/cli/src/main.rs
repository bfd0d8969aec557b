use clap::{Args, Parser, Subcommand};
use savanna::diagnostics::{recovery_constants, theta_prime};
use savanna::ide::ide_constants;
use savanna::meanfield::{classify_origin, survival_condition};
use savanna_cli::config::{ExperimentKind, ExperimentSpec};
use savanna_cli::run::{run_experiment, RunOptions, RunOutcome};
use savanna_cli::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

/// Simulation and diagnostics for stochastic savanna vegetation models.
#[derive(Parser)]
#[command(name = "savanna", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replica farms: survival, stationary density, recovery, BRW and
    /// moving-particle experiments.
    Simulate(Common),
    /// Two-parameter phase diagram.
    Sweep(Common),
    /// Drift, recovery, BRW and moving-particle checks.
    Diagnose(Common),
    /// Integro-difference front runs and the growth-condition verifier.
    Ide(Common),
    /// Print derived constants for every grid point as JSON.
    Constants(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(c: &Common) -> Result<(ExperimentSpec, String), CliError> {
    let text = std::fs::read_to_string(&c.config)
        .map_err(|e| CliError::config("<file>", format!("{}: {e}", c.config.display())))?;
    let mut spec = ExperimentSpec::from_toml(&text)?;
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    if let Some(r) = c.replicas {
        spec.replicas = r;
    }
    if let Some(o) = &c.out {
        spec.out = Some(o.clone());
    }
    spec.validate()?;
    Ok((spec, text))
}

fn allowed(cmd: &Command) -> &'static [ExperimentKind] {
    use ExperimentKind::*;
    match cmd {
        Command::Simulate(_) => &[
            SurvivalFiniteSeed,
            StationaryDensity,
            Recovery,
            BrwBounds,
            MovingParticles,
            PhaseSweep,
        ],
        Command::Sweep(_) => &[PhaseSweep],
        Command::Diagnose(_) => &[
            DiagnosticsSuite,
            Recovery,
            BrwBounds,
            MovingParticles,
            GrowthVerify,
        ],
        Command::Ide(_) => &[IdeFront, GrowthVerify],
        Command::Constants(_) => &[],
    }
}

fn summarize(o: &RunOutcome) {
    println!(
        "{}: {} records over {} grid point(s){}",
        o.manifest.experiment,
        o.records.len(),
        o.manifest.grid_points,
        o.out_dir
            .as_ref()
            .map(|d| format!(", written to {}", d.display()))
            .unwrap_or_default()
    );
    const SHOWN: usize = 20;
    let summaries: Vec<_> = o.records.iter().filter(|r| r.replica.is_none()).collect();
    if summaries.len() > SHOWN {
        println!("  (first {SHOWN} of {} grid points)", summaries.len());
    }
    for r in summaries.into_iter().take(SHOWN) {
        let pass = r
            .flags
            .get("pass")
            .map(|p| if *p { " pass" } else { " FAIL" })
            .unwrap_or("");
        println!("  grid {}{}: {:?}", r.grid_index, pass, r.params);
    }
}

fn constants(spec: &ExperimentSpec) -> Result<(), CliError> {
    let d = spec
        .geometry
        .as_ref()
        .map(|g| g.d)
        .or(spec.ide.as_ref().map(|i| i.d))
        .unwrap_or(1);
    let kappa = spec.ide.as_ref().map(|i| i.kappa).unwrap_or(1.0);
    let mut out = Vec::new();
    for gp in spec.params.points()? {
        let p = &gp.params;
        let w = p.krone_omega();
        let rc = recovery_constants(p, d, spec.diagnostics.a0_init).ok();
        let tp = theta_prime(p).ok();
        let t3 = ide_constants(p, kappa, d).ok();
        out.push(serde_json::json!({
            "grid_index": gp.index,
            "params": gp.values,
            "meanfield": classify_origin(p, w),
            "survival_condition": survival_condition(p, w),
            "recovery": rc,
            "theta_prime": tp,
            "ide": t3,
        }));
    }
    let text = serde_json::to_string_pretty(&out).map_err(|e| CliError::Io(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let c = match &cli.command {
        Command::Simulate(c)
        | Command::Sweep(c)
        | Command::Diagnose(c)
        | Command::Ide(c)
        | Command::Constants(c) => c,
    };
    let (spec, text) = load(c)?;
    if let Command::Constants(_) = cli.command {
        return constants(&spec);
    }
    let ok = allowed(&cli.command);
    if !ok.contains(&spec.kind) {
        let names: Vec<&str> = ok.iter().map(|k| k.as_str()).collect();
        return Err(CliError::config(
            "kind",
            format!(
                "{} not handled by this subcommand (expected one of {})",
                spec.kind.as_str(),
                names.join(", ")
            ),
        ));
    }
    let outcome = run_experiment(
        &spec,
        &text,
        &RunOptions {
            threads: c.threads,
            out: None,
        },
    )?;
    summarize(&outcome);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let CliError::PartialFailure { failures, outcome } = &e {
                summarize(outcome);
                for f in failures {
                    eprintln!(
                        "failed: grid {} replica {:?}: {}",
                        f.grid_index, f.replica, f.message
                    );
                }
            }
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
