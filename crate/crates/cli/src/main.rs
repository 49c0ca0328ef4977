use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drtk::crossfit::{estimate_effect, EstimatorConfig};
use drtk::data::{Dataset, Schema};
use drtk::dgm::{calibrate_effect, generate, recenter, DgmSpec, RECENTER_N, TRUTH_N};
use drtk::error::Error;
use drtk::harness::{cached_truth, run_benchmark, BenchmarkConfig, TRUTH_SEED};
use drtk::rng::RngStream;

const EXIT_VALIDATION: u8 = 2;
const EXIT_ESTIMATION: u8 = 3;

#[derive(Parser)]
#[command(name = "drtk", version, about = "Doubly robust average causal effect estimation and simulation")]
struct Cli {
    /// Log progress to standard error.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the average causal effect on one dataset and print it as JSON.
    Estimate {
        /// Dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// Column roles JSON.
        #[arg(long)]
        schema: PathBuf,
        /// Estimator configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configuration seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw one dataset from a mechanism; writes the CSV plus schema and truth sidecars.
    Simulate {
        /// Built-in mechanism name or spec JSON path.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Exposure effect override (the outcome is recentered).
        #[arg(long)]
        beta: Option<f64>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Oracle draws for the truth sidecar.
        #[arg(long, default_value_t = TRUTH_N)]
        truth_n: usize,
    },
    /// Compute the true average causal effect of a mechanism.
    Truth {
        #[arg(long)]
        spec: String,
        /// Oracle draws.
        #[arg(long, default_value_t = TRUTH_N)]
        n: usize,
        /// Oracle seed.
        #[arg(long, default_value_t = TRUTH_SEED)]
        seed: u64,
        /// Writes the record here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Find the exposure effect giving the target power at sample size n.
    Calibrate {
        #[arg(long)]
        spec: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.8)]
        power: f64,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        workers: Option<usize>,
        /// Writes the calibrated spec JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a benchmark grid and write replications.csv, performance.csv and manifest.json.
    Benchmark {
        /// Benchmark configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured root seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured worker count.
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Leave flagged records out of performance.csv.
        #[arg(long)]
        exclude_flagged: bool,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Drtk(#[from] Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Drtk(e) if !e.is_validation() => EXIT_ESTIMATION,
            _ => EXIT_VALIDATION,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value).map_err(Error::from)?);
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text + "\n").map_err(Error::from)?;
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}.json"))
}

fn with_beta(spec: DgmSpec, beta: Option<f64>) -> Result<DgmSpec> {
    Ok(match beta {
        Some(b) => recenter(&spec.with_beta(b), RECENTER_N, &RngStream::new(TRUTH_SEED, 1))?,
        None => spec,
    })
}

fn thread_pool(workers: Option<usize>) -> Result<()> {
    if let Some(w) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Estimate { data, schema, config, seed } => {
            let schema = Schema::from_json_file(&schema)?;
            let data = Dataset::load_csv(&data, &schema)?;
            let mut config = EstimatorConfig::from_json_file(&config)?;
            if let Some(s) = seed {
                config.seed = s;
            }
            print_json(&estimate_effect(&data, &config)?)
        }
        Command::Simulate { spec, n, seed, beta, out, truth_n } => {
            let spec = with_beta(DgmSpec::resolve(&spec)?, beta)?;
            let data = generate(&spec, n, &RngStream::new(seed, 0))?;
            let file = std::fs::File::create(&out).map_err(Error::from)?;
            data.write_csv(std::io::BufWriter::new(file))?;
            write_json(&sidecar(&out, "schema"), &data.csv_schema())?;
            write_json(&sidecar(&out, "truth"), &cached_truth(&spec, truth_n, None)?)
        }
        Command::Truth { spec, n, seed, out } => {
            let spec = DgmSpec::resolve(&spec)?;
            let rec = drtk::dgm::true_ace(&spec, n, &RngStream::new(seed, 0))?;
            match out {
                Some(p) => write_json(&p, &rec),
                None => print_json(&rec),
            }
        }
        Command::Calibrate { spec, n, power, reps, seed, workers, out } => {
            thread_pool(workers)?;
            let spec = DgmSpec::resolve(&spec)?;
            let cal = calibrate_effect(&spec, n, power, reps, &RngStream::new(seed, 0))?;
            if let Some(p) = out {
                write_json(&p, &cal.spec)?;
            }
            print_json(&cal)
        }
        Command::Benchmark { config, seed, workers, out, exclude_flagged } => {
            let mut cfg = BenchmarkConfig::from_json_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            if out.is_some() {
                cfg.out = out;
            }
            cfg.exclude_flagged |= exclude_flagged;
            let dir = cfg
                .out
                .clone()
                .ok_or_else(|| CliError::Usage("benchmark needs an output directory (--out or \"out\")".into()))?;
            let res = run_benchmark(&cfg)?;
            res.write(&dir)?;
            eprintln!(
                "{} records ({} failed, {} flagged) written to {}",
                res.manifest.records,
                res.manifest.failed,
                res.manifest.flagged,
                dir.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
