use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wealthkin::harness::{self, Scale, Scenario, Task};
use wealthkin::Error;

/// Multiscale wealth-distribution simulations driven by scenario files.
#[derive(Parser, Debug)]
#[command(name = "wealthkin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Closed-form and numeric Gibbs tables and their moments.
    Equilibrium(Common),
    /// Adjoint residuals and annihilation of moment-matched densities.
    GciCheck(Common),
    /// Agent-based simulation.
    Particles(Common),
    /// Kinetic (Fokker-Planck) simulation.
    Kinetic(Common),
    /// Macroscopic closure.
    Macro(Common),
    /// Cross-scale norms and convergence sweeps of the scenario's scales.
    Compare(Common),
    /// Power-law slope of a terminal wealth density.
    TailFit(Common),
    /// Every scale listed in the scenario, plus compare and tail-fit when configured.
    Run(Common),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory; defaults to `output_dir` of the scenario.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = "warn")]
    log_level: log::LevelFilter,
}

fn tasks(cmd: &Command, s: &Scenario) -> Option<Vec<Task>> {
    Some(match cmd {
        Command::Equilibrium(_) => vec![Task::Scale(Scale::Equilibrium)],
        Command::GciCheck(_) => vec![Task::Scale(Scale::Gci)],
        Command::Particles(_) => vec![Task::Scale(Scale::Particles)],
        Command::Kinetic(_) => vec![Task::Scale(Scale::Kinetic)],
        Command::Macro(_) => vec![Task::Scale(Scale::Macro)],
        Command::Compare(_) => {
            let mut t: Vec<Task> = s
                .spec
                .scales
                .iter()
                .filter(|c| matches!(c, Scale::Particles | Scale::Kinetic | Scale::Macro))
                .map(|c| Task::Scale(*c))
                .collect();
            t.push(Task::Compare);
            t
        }
        Command::TailFit(_) => vec![Task::TailFit],
        Command::Run(_) => return None,
    })
}

fn execute(cmd: &Command, c: &Common) -> Result<bool, Error> {
    let mut s = harness::parse_scenario(&c.scenario)?;
    if let Some(seed) = c.seed {
        s = s.with_seed(seed);
    }
    let out: PathBuf = match (&c.out, &s.spec.output_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => relative_to(&c.scenario, o),
        (None, None) => return Err(Error::Validation(vec!["no --out given and the scenario has no output_dir".into()])),
    };
    let manifest = match tasks(cmd, &s) {
        Some(t) => harness::run_tasks(&s, &out, &t)?,
        None => harness::run_scenario(&s, &out)?,
    };
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    for (task, e) in &manifest.failures {
        eprintln!("error: {task}: {e}");
    }
    println!("wrote {} files to {}", manifest.outputs.len() + 1, out.display());
    Ok(manifest.succeeded())
}

fn relative_to(scenario: &Path, dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    scenario.parent().map_or_else(|| dir.to_path_buf(), |p| p.join(dir))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = match &cli.command {
        Command::Equilibrium(c)
        | Command::GciCheck(c)
        | Command::Particles(c)
        | Command::Kinetic(c)
        | Command::Macro(c)
        | Command::Compare(c)
        | Command::TailFit(c)
        | Command::Run(c) => c,
    };
    env_logger::Builder::new().filter_level(c.log_level).init();
    if let Some(n) = c.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(&cli.command, c) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
