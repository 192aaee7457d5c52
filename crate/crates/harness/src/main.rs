use std::path::PathBuf;
use std::process::ExitCode;

use backsim_harness::checks::{all_pass, evaluate};
use backsim_harness::emit::emit_results;
use backsim_harness::experiments::run;
use backsim_harness::spec::{ExperimentKind, ExperimentSpec};
use clap::Parser;

/// Run one simulation experiment and write its result files.
#[derive(Debug, Parser)]
#[command(name = "backsim", version)]
struct Cli {
    experiment: ExperimentKind,
    /// Experiment spec (JSON). Missing fields take the experiment defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Evaluate the acceptance thresholds; exit 2 if any fails.
    #[arg(long)]
    check: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn real_main(cli: &Cli) -> backsim_harness::Result<ExitCode> {
    if let Some(k) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| backsim_harness::HarnessError::Invalid(e.to_string()))?;
    }
    let mut spec = match &cli.config {
        Some(p) => ExperimentSpec::load(p)?,
        None => ExperimentSpec::default_for(cli.experiment),
    };
    if spec.kind != cli.experiment {
        return Err(backsim_harness::HarnessError::Spec(format!(
            "config is for {} but {} was requested",
            spec.kind.id(),
            cli.experiment.id()
        )));
    }
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    let record = run(&spec)?;
    for f in emit_results(&record, &cli.out)? {
        println!("wrote {}", f.display());
    }
    if cli.check {
        let results = evaluate(&record)?;
        for r in &results {
            println!("{}", r.line());
        }
        if !all_pass(&results) {
            return Ok(ExitCode::from(2));
        }
    }
    Ok(ExitCode::SUCCESS)
}
