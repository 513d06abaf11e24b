//! `iclfgd verify|train|sweep --config <path> --out <dir>`.
//!
//! Each invocation writes into `<out>/<command>-<hash>-seed<seed>/`, where
//! `<hash>` is derived from the resolved configuration. The resolved
//! configuration itself is saved there as `config.conf`.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use iclfgd::config::{ExperimentConfig, LabelKind};
use iclfgd::funcgd::bayes_risk;
use iclfgd::kernels::KernelSpec;
use iclfgd::train::{eval_batch, median_history, run_training_with, RunHistory};
use iclfgd::transformer::Activation;
use iclfgd::verify::run_verify;
use iclfgd::Error;

#[derive(Parser)]
#[command(name = "iclfgd", version, about = "Nonlinear in-context learning: verification, training and sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the randomized property suites and write a report.
    Verify(Args),
    /// Train `train.runs` models and write one history CSV per run plus the median.
    Train(Args),
    /// Train one model per sweep cell and write a long-format CSV.
    Sweep(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Parent directory for the output directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Replace a configuration entry, e.g. `--override train.steps=100`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

/// Failure classes, mapped to exit codes 2 and 1.
enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Run(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Verify(a) => ("verify", a),
        Command::Train(a) => ("train", a),
        Command::Sweep(a) => ("sweep", a),
    };
    let result = setup(name, args).and_then(|(config, dir, pool)| {
        pool.install(|| match cli.command {
            Command::Verify(_) => cmd_verify(&config, &dir),
            Command::Train(_) => cmd_train(&config, &dir),
            Command::Sweep(_) => cmd_sweep(&config, &dir),
        })
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn setup(command: &str, args: &Args) -> Result<(ExperimentConfig, PathBuf, rayon::ThreadPool), Failure> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", args.config.display())))?;
    let config = ExperimentConfig::parse_with_overrides(&text, &args.overrides)
        .map_err(|e| Failure::Usage(format!("{}: {e}", args.config.display())))?;
    if args.jobs == Some(0) {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    let jobs = args.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::Run(e.to_string()))?;
    let dir = output_dir(&args.out, command, &config);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.conf"), config.to_text())?;
    eprintln!("writing to {}", dir.display());
    Ok((config, dir, pool))
}

/// `<out>/<command>-<first 16 hex digits of sha256(config)>-seed<seed>`.
fn output_dir(out: &Path, command: &str, config: &ExperimentConfig) -> PathBuf {
    let digest = Sha256::digest(config.to_text().as_bytes());
    let hash: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    out.join(format!("{command}-{hash}-seed{}", config.seed))
}

fn cmd_verify(config: &ExperimentConfig, dir: &Path) -> Result<(), Failure> {
    let report = run_verify(config)?;
    report.write(BufWriter::new(fs::File::create(dir.join("verify_report.txt"))?))?;
    report.write(std::io::stdout())?;
    if report.all_passed() {
        Ok(())
    } else {
        Err(Failure::Run("verification failed".into()))
    }
}

fn train_run(config: &ExperimentConfig, run: usize) -> Result<RunHistory, Failure> {
    let progress = |r: &iclfgd::train::EvalRecord| {
        eprintln!("run {run} step {}: eval loss {:.6e}", r.step, r.eval_loss);
    };
    let trained = run_training_with(config, run, Some(&progress)).map_err(|e| match e {
        Error::Diverged { step, loss } => Failure::Run(format!("run {run} diverged at step {step} (loss {loss})")),
        other => other.into(),
    })?;
    Ok(trained.history)
}

fn write_history(path: &Path, history: &RunHistory) -> Result<(), Failure> {
    history.write_csv(BufWriter::new(fs::File::create(path)?))?;
    Ok(())
}

fn cmd_train(config: &ExperimentConfig, dir: &Path) -> Result<(), Failure> {
    let histories = (0..config.train.runs)
        .into_par_iter()
        .map(|run| train_run(config, run))
        .collect::<Result<Vec<_>, _>>()?;
    for (run, h) in histories.iter().enumerate() {
        write_history(&dir.join(format!("run{run}.csv")), h)?;
    }
    write_history(&dir.join("median.csv"), &median_history(&histories)?)?;
    Ok(())
}

struct Cell {
    kernel: KernelSpec,
    activation: Activation,
    n: usize,
    layers: usize,
    run: usize,
}

fn cell_config(base: &ExperimentConfig, kernel: KernelSpec, activation: Activation, n: usize, layers: usize) -> ExperimentConfig {
    ExperimentConfig { kernel, activation, n, layers, ..base.clone() }
}

/// Quotes a CSV field that contains a comma or a quote.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cmd_sweep(config: &ExperimentConfig, dir: &Path) -> Result<(), Failure> {
    let s = &config.sweep;
    let mut cells = Vec::new();
    for &kernel in &s.kernel_values {
        for &activation in &s.activation_values {
            for &n in &s.n_values {
                for &layers in &s.layers_values {
                    for run in 0..config.train.runs {
                        cells.push(Cell { kernel, activation, n, layers, run });
                    }
                }
            }
        }
    }
    let losses = cells
        .par_iter()
        .map(|c| {
            let cfg = cell_config(config, c.kernel, c.activation, c.n, c.layers);
            let h = train_run(&cfg, c.run)?;
            Ok(h.last().expect("training records the final step").eval_loss)
        })
        .collect::<Result<Vec<f64>, Failure>>()?;

    // Bayes risk on the same held-out prompts, when labels come from a PSD kernel.
    let with_bayes = config.labels == LabelKind::Kgp && s.kernel_values.iter().all(KernelSpec::is_psd);
    let bayes = if with_bayes {
        cells
            .par_iter()
            .map(|c| {
                let cfg = cell_config(config, c.kernel, c.activation, c.n, c.layers);
                let sigma = cfg.sigma_for_run(c.run)?;
                Ok(Some(bayes_risk(c.kernel, &eval_batch(&cfg, c.run)?, &sigma.inv_sqrt)?))
            })
            .collect::<Result<Vec<_>, Error>>()?
    } else {
        vec![None; cells.len()]
    };

    let mut text = String::from("kernel,activation,n,layers,run,final_eval_loss,log10_loss");
    if with_bayes {
        text.push_str(",bayes_loss");
    }
    text.push('\n');
    for ((c, loss), b) in cells.iter().zip(&losses).zip(&bayes) {
        let kernel = csv_field(&c.kernel.to_string());
        text.push_str(&format!("{kernel},{},{},{},{},{loss:?},{:?}", c.activation, c.n, c.layers, c.run, loss.log10()));
        if let Some(b) = b {
            text.push_str(&format!(",{b:?}"));
        }
        text.push('\n');
    }
    fs::write(dir.join("sweep.csv"), text)?;
    Ok(())
}
