mod config;
mod error;
mod manifest;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

use config::{Cli, Command, FileConfig, Job, Resolver};
use error::{usage, CliError, Result};
use manifest::{sha256_file, RunManifest};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    cli.out.clone().ok_or_else(|| usage("--out is required"))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let workers = cli.workers.or(file.workers);
    let resolver = Resolver {
        cli_seed: cli.seed,
        file: &file,
    };
    let job = match &cli.command {
        Command::Prepare(a) => Job::Prepare(resolver.prepare(a)?),
        Command::Train(a) => Job::Train(resolver.train(a)?),
        Command::Ablate(a) => Job::Ablate(resolver.ablate(a)?),
        Command::Sweep(a) => Job::Sweep(resolver.sweep(a)?),
        Command::Replay(a) => return replay(&a.manifest, &out_dir(cli)?, workers),
    };
    let out = out_dir(cli)?;
    let manifest = run_job(job, &out, workers)?;
    println!("wrote {} artifacts to {}", manifest.artifacts.len(), out.display());
    Ok(())
}

fn run_job(job: Job, out: &Path, workers: Option<usize>) -> Result<RunManifest> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(usage("--workers must be positive"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| usage(format!("cannot start {workers:?} workers: {e}")))?;
    let (inputs, artifacts) = pool.install(|| run::execute(&job, out))?;
    let manifest = RunManifest::new(job, inputs, out, &artifacts)?;
    manifest.write(out)?;
    Ok(manifest)
}

/// Re-runs the recorded job into `out` and compares every artifact digest.
fn replay(manifest_path: &Path, out: &Path, workers: Option<usize>) -> Result<()> {
    let recorded = RunManifest::read(manifest_path)?;
    for input in &recorded.inputs {
        let now = sha256_file(&input.path)?;
        if now != input.sha256 {
            return Err(CliError::Config {
                path: input.path.clone(),
                message: "input changed since the recorded run".into(),
            });
        }
    }
    if let Job::Train(t) = &recorded.job {
        if t.timings {
            log::warn!("recorded run logged timings; epoch logs will differ");
        }
    }
    let fresh = run_job(recorded.job.clone(), out, workers)?;
    let mut mismatches = 0;
    for old in &recorded.artifacts {
        match fresh.artifacts.iter().find(|a| a.path == old.path) {
            Some(new) if new.sha256 == old.sha256 => {}
            Some(_) => {
                mismatches += 1;
                eprintln!("differs: {}", old.path.display());
            }
            None => {
                mismatches += 1;
                eprintln!("missing: {}", old.path.display());
            }
        }
    }
    if mismatches > 0 {
        return Err(CliError::Mismatch(mismatches));
    }
    println!(
        "replayed {} artifacts into {}; all match",
        recorded.artifacts.len(),
        out.display()
    );
    Ok(())
}
