//! `bartree`: simulate trees, fit them, print limit objects and run seeded
//! Monte Carlo verification from JSON configs.

mod config;

use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use bartree_core::model::is_stable;
use bartree_core::simulate::simulate_tree_unchecked;
use bartree_core::{assemble, estimate, run_experiment_with_jobs, BarError, BarParams, TreeSample, Verdict};
use clap::{Parser, Subcommand};

use config::{ConfigParseError, MissingKey, RunConfigDocument};

#[derive(Debug, Parser)]
#[command(name = "bartree", version, about = "Bifurcating autoregressive processes on binary trees")]
struct Cli {
    /// Worker threads for replicate runs (default: available processors).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the limit objects (lambda, T, ell, L, covariances) for a config.
    Limits {
        #[arg(long)]
        config: PathBuf,
        /// Write the document here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate one tree and write it as `node_id,x` CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip the contraction check.
        #[arg(long)]
        unsafe_allow_unstable: bool,
    },
    /// Fit theta, sigma2 and rho to a tree CSV.
    Estimate {
        #[arg(long)]
        tree: PathBuf,
        /// Model order.
        #[arg(long)]
        p: usize,
        /// Generations to use (default: all in the file).
        #[arg(long)]
        n: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the Monte Carlo checks and write a verification report.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-replicate statistics next to the report.
        #[arg(long)]
        emit_replicates: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 1 for I/O and parse failures, 2 for domain and validation failures,
/// 3 for internal-consistency failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<BarError>() {
            return match e {
                BarError::Domain(_) | BarError::Validation(_) | BarError::Instability(_) => 2,
                BarError::Consistency(_) => 3,
                BarError::Parse { .. } | BarError::Io(_) => 1,
            };
        }
        if cause.is::<MissingKey>() {
            return 2;
        }
        if cause.is::<ConfigParseError>() || cause.is::<io::Error>() {
            return 1;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Limits { config, out } => {
            let doc = RunConfigDocument::load(&config)?;
            require_stable(&doc.params)?;
            let moments = doc.noise.theoretical_moments()?;
            let limits = assemble(&doc.params, &moments)?;
            emit_json(&limits.to_document(), out.as_deref())
        }
        Command::Simulate { config, out, unsafe_allow_unstable } => {
            let doc = RunConfigDocument::load(&config)?;
            let seed = doc.seed("simulate")?;
            let n = doc.generations("simulate")?;
            if !unsafe_allow_unstable {
                require_stable(&doc.params)?;
            }
            let sample = simulate_tree_unchecked(&doc.params, &doc.noise, &doc.init, n, seed)?;
            let mut buf = Vec::with_capacity(sample.len() * 24);
            sample.write_csv(&mut buf)?;
            write_atomic(&out, &buf)
        }
        Command::Estimate { tree, p, n, out } => {
            let file = File::open(&tree).with_context(|| format!("cannot open {}", tree.display()))?;
            let sample = TreeSample::read_csv(p, BufReader::new(file))
                .with_context(|| format!("reading {}", tree.display()))?;
            let n = n.unwrap_or(sample.n_generations);
            let result = estimate(&sample, n)?;
            emit_json(&result, out.as_deref())
        }
        Command::Verify { config, out, emit_replicates } => {
            let doc = RunConfigDocument::load(&config)?;
            let experiment = doc.experiment()?;
            require_stable(&experiment.params)?;
            if emit_replicates && out.is_none() {
                anyhow::bail!(BarError::Validation("--emit-replicates needs --out".into()));
            }
            let jobs = cli.jobs.unwrap_or_else(default_jobs);
            let report = run_experiment_with_jobs(&experiment, jobs)?;
            for check in &report.checks {
                let verdict = match check.verdict {
                    Verdict::Pass => "pass",
                    Verdict::Fail => "FAIL",
                    Verdict::InsufficientReplicates => "insufficient replicates",
                };
                eprintln!("{:<14} {verdict}", serde_json::to_string(&check.check)?.trim_matches('"'));
            }
            emit_json(&report, out.as_deref())?;
            if let (true, Some(path)) = (emit_replicates, out.as_deref()) {
                write_atomic(&replicates_path(path), report.replicates_csv().as_bytes())?;
            }
            Ok(())
        }
    }
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Refuses non-contracting models, printing the stability report.
fn require_stable(params: &BarParams) -> anyhow::Result<()> {
    let report = is_stable(params)?;
    if report.stable {
        return Ok(());
    }
    eprintln!("{}", serde_json::to_string_pretty(&report)?);
    Err(BarError::Instability(format!(
        "contraction check failed: no product bound below 1 (best {:.6})",
        report.joint_bound()
    ))
    .into())
}

fn emit_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            io::stdout().lock().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

/// `report.json` -> `report.replicates.csv`
fn replicates_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().map_or_else(|| "report".into(), |s| s.to_string_lossy().into_owned());
    report.with_file_name(format!("{stem}.replicates.csv"))
}

/// Writes to a sibling temporary file and renames it over `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let name = path
        .file_name()
        .with_context(|| format!("{} is not a file path", path.display()))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| -> io::Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.with_context(|| format!("cannot write {}", path.display()))
}
