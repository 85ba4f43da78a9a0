use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use zpsync::channel::simulate_stream;
use zpsync::estimators::{estimate_csv_header, estimate_csv_record, run_estimator, EstimatorId};
use zpsync::harness::{manifest, run_experiment, write_results_csv, ExperimentKind, ExperimentSpec, TrialSeed};
use zpsync::moments::{block_statistics, som_variance, variance_oracle, MomentTable, VarianceMode};
use zpsync::{ChannelProfile, ConfigFile, Error, SampleStream, SignalMode, SystemConfig, Transmitter};

const MOMENTS_SCHEMA: &str = "zpsync.moments.v1";
const ESTIMATE_SCHEMA: &str = "zpsync.estimate.v1";

#[derive(Debug, Parser)]
#[command(name = "zpsync", version, about = "Blind timing-offset estimation for zero-padded OFDM")]
struct Cli {
    /// JSON configuration file; missing keys take reference values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master RNG seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override a config key, e.g. `--set n_h=4` or `--set 'pdp=[0.5,0.5]'`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print one period of the theoretical moment and weight tables.
    Moments(MomentsArgs),
    /// Estimate the offset of a single stream.
    Estimate(EstimateArgs),
    /// Run one of the canonical Monte Carlo sweeps.
    Experiment(ExperimentArgs),
    /// Compare brute-force moment statistics with the analytical variance.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
struct MomentsArgs {
    /// Add Monte Carlo mean and variance columns over T aligned blocks.
    #[arg(long, value_name = "T")]
    empirical: Option<u64>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Simulate a stream with this true offset.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "input")]
    d: Option<i64>,
    /// Read the stream from a binary dump instead of simulating one.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Write the simulated stream to a binary dump.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Append the full cost curve to each row.
    #[arg(long)]
    curve: bool,
    /// Estimators to run (som, wsom, tm); all when absent.
    #[arg(long, value_delimiter = ',')]
    estimators: Vec<EstimatorId>,
    /// Weight formula for wsom.
    #[arg(long, value_enum, default_value = "oracle-corrected")]
    variance: VarianceArg,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// snr, doppler, blocks, taps, pdp, pmf or mse.
    #[arg(long)]
    experiment: ExperimentKind,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Replace the canonical grid.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    grid: Vec<f64>,
    /// Eb/N0 used when the sweep variable is not Eb/N0.
    #[arg(long, default_value_t = 15.0, allow_hyphen_values = true)]
    ebn0_db: f64,
    #[arg(long, value_delimiter = ',')]
    estimators: Vec<EstimatorId>,
    #[arg(long, value_enum, default_value = "oracle-corrected")]
    variance: VarianceArg,
}

#[derive(Debug, Args)]
struct OracleArgs {
    /// In-block sample index.
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 1_000_000, value_parser = clap::value_parser!(u64).range(10_000..))]
    trials: u64,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum VarianceArg {
    Paper,
    OracleCorrected,
}

impl From<VarianceArg> for VarianceMode {
    fn from(v: VarianceArg) -> Self {
        match v {
            VarianceArg::Paper => VarianceMode::PaperFormula,
            VarianceArg::OracleCorrected => VarianceMode::OracleCorrected,
        }
    }
}

/// A failure tagged with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn config_failure(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: error.into() }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(e) if is_config_error(e) => 2,
            _ => 1,
        };
        Failure { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::IsiViolation { .. } | Error::Range { .. } | Error::OffsetRange { .. } | Error::UnsupportedOrder(_)
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) if is_broken_pipe(&f.error) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

/// A closed downstream pipe (`| head`) is not a failure.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        let io = c
            .downcast_ref::<io::Error>()
            .or_else(|| match c.downcast_ref::<csv::Error>()?.kind() {
                csv::ErrorKind::Io(e) => Some(e),
                _ => None,
            });
        io.is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe)
    }) || matches!(e.downcast_ref::<Error>(), Some(Error::Io(m)) if m.contains("Broken pipe"))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let file = load_config(cli.config.as_deref(), &cli.overrides)?;
    let (cfg, profile, signal) = file.resolve().map_err(config_failure)?;
    match &cli.command {
        Command::Moments(args) => cmd_moments(cli, &cfg, &profile, signal, args),
        Command::Estimate(args) => cmd_estimate(cli, &cfg, &profile, signal, args),
        Command::Experiment(args) => cmd_experiment(cli, &cfg, &profile, signal, args),
        Command::Oracle(args) => cmd_oracle(cli, &cfg, &profile, args),
    }
}

/// Load the file (or reference defaults) as JSON, then apply `key=value` overrides.
fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ConfigFile, Failure> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(config_failure)?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", p.display()))
                .map_err(config_failure)?
        }
        None => serde_json::to_value(ConfigFile::default()).expect("config serializes"),
    };
    let map = value
        .as_object_mut()
        .ok_or_else(|| config_failure(anyhow::anyhow!("config must be a JSON object")))?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| config_failure(anyhow::anyhow!("override {o:?} is not key=value")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        map.insert(key.trim().to_string(), parsed);
    }
    ConfigFile::from_value(value).map_err(config_failure)
}

fn open_out(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn csv_writer(path: Option<&Path>) -> anyhow::Result<csv::Writer<Box<dyn Write>>> {
    Ok(csv::Writer::from_writer(open_out(path)?))
}

fn cmd_moments(
    cli: &Cli,
    cfg: &SystemConfig,
    profile: &ChannelProfile,
    signal: SignalMode,
    args: &MomentsArgs,
) -> Result<(), Failure> {
    let paper = MomentTable::build(cfg, profile, VarianceMode::PaperFormula);
    let oracle = MomentTable::build(cfg, profile, VarianceMode::OracleCorrected);
    let empirical = args
        .empirical
        .map(|t| with_threads(cli.threads, || block_statistics(cfg, profile, signal, t, cli.seed)))
        .transpose()?;
    let mut w = csv_writer(cli.out.as_deref())?;
    let mut header = vec!["schema", "k", "m0", "f_paper", "f_oracle"];
    if empirical.is_some() {
        header.extend(["m0_empirical", "var_empirical"]);
    }
    w.write_record(&header).map_err(anyhow::Error::from)?;
    for k in 0..cfg.n_s() {
        let mut row = vec![
            MOMENTS_SCHEMA.to_string(),
            k.to_string(),
            oracle.m0[k].to_string(),
            paper.f[k].to_string(),
            oracle.f[k].to_string(),
        ];
        if let Some(stats) = &empirical {
            row.push(stats[k].mean.to_string());
            row.push(stats[k].variance().to_string());
        }
        w.write_record(&row).map_err(anyhow::Error::from)?;
    }
    w.flush().map_err(anyhow::Error::from)?;
    Ok(())
}

fn cmd_estimate(
    cli: &Cli,
    cfg: &SystemConfig,
    profile: &ChannelProfile,
    signal: SignalMode,
    args: &EstimateArgs,
) -> Result<(), Failure> {
    let stream = match (&args.input, args.d) {
        (Some(path), _) => {
            let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let stream = SampleStream::read_from(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
            if stream.len() != cfg.l() || stream.m_r() != cfg.m_r {
                return Err(config_failure(anyhow::anyhow!(
                    "dump holds {} antennas x {} samples, config expects {} x {}",
                    stream.m_r(),
                    stream.len(),
                    cfg.m_r,
                    cfg.l()
                )));
            }
            stream
        }
        (None, Some(d)) => {
            let tx = Transmitter::new(cfg, signal)?;
            let mut rng = TrialSeed { master: cli.seed, point: 0, trial: 0 }.rng();
            let mut stream = simulate_stream(cfg, profile, &tx, d, &mut rng)?;
            stream.seed = cli.seed;
            stream
        }
        (None, None) => return Err(config_failure(anyhow::anyhow!("estimate needs --d or --input"))),
    };
    if let Some(path) = &args.dump {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(f);
        stream.write_to(&mut w)?;
        w.flush().map_err(anyhow::Error::from)?;
    }
    let table = MomentTable::build(cfg, profile, args.variance.into());
    let ids = if args.estimators.is_empty() { EstimatorId::ALL.to_vec() } else { args.estimators.clone() };
    let mut w = csv_writer(cli.out.as_deref())?;
    let mut header = vec!["schema".to_string()];
    header.extend(estimate_csv_header(cfg, args.curve));
    w.write_record(&header).map_err(anyhow::Error::from)?;
    for id in ids {
        let est = run_estimator(id, &stream, cfg, &table, None)?;
        let mut row = vec![ESTIMATE_SCHEMA.to_string()];
        row.extend(estimate_csv_record(&est, stream.truth_d.get(), args.curve));
        w.write_record(&row).map_err(anyhow::Error::from)?;
    }
    w.flush().map_err(anyhow::Error::from)?;
    Ok(())
}

fn cmd_experiment(
    cli: &Cli,
    cfg: &SystemConfig,
    profile: &ChannelProfile,
    signal: SignalMode,
    args: &ExperimentArgs,
) -> Result<(), Failure> {
    let mut spec = ExperimentSpec::canonical(args.experiment, cfg.clone(), profile.clone());
    spec.signal = signal;
    spec.trials = args.trials;
    spec.ebn0_db = args.ebn0_db;
    spec.master_seed = cli.seed;
    spec.variance_mode = args.variance.into();
    if !args.grid.is_empty() {
        spec.grid = args.grid.clone();
    }
    if !args.estimators.is_empty() {
        spec.estimators = args.estimators.clone();
    }
    let result = run_experiment(&spec, cli.threads)?;
    write_results_csv(&result, open_out(cli.out.as_deref())?)?;
    if let Some(out) = &cli.out {
        let path = out.with_extension("manifest.json");
        let text = serde_json::to_string_pretty(&manifest(&result)).map_err(anyhow::Error::from)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    if result.partial {
        return Err(Failure {
            code: 1,
            error: anyhow::anyhow!("{} trial(s) failed; results marked partial: {}", result.failures.len(), result.failures[0]),
        });
    }
    Ok(())
}

fn cmd_oracle(cli: &Cli, cfg: &SystemConfig, profile: &ChannelProfile, args: &OracleArgs) -> Result<(), Failure> {
    if args.k >= cfg.n_s() {
        return Err(config_failure(anyhow::anyhow!("k must be below n_s = {}", cfg.n_s())));
    }
    let stats = with_threads(cli.threads, || variance_oracle(cfg, profile, args.k, args.trials, cli.seed))?;
    let (paper_f, paper_noise) = som_variance(cfg, profile, VarianceMode::PaperFormula);
    let (oracle_f, oracle_noise) = som_variance(cfg, profile, VarianceMode::OracleCorrected);
    let m0 = MomentTable::build(cfg, profile, VarianceMode::OracleCorrected).m0[args.k];
    let var = stats.variance();
    let rel = |x: f64| if x == 0.0 { f64::NAN } else { (var - x) / x };
    let mut w = open_out(cli.out.as_deref())?;
    let mut report = || -> io::Result<()> {
        let region = if args.k >= cfg.noise_start() { "noise" } else { "signal" };
        writeln!(w, "k                  {} ({region} region)", args.k)?;
        writeln!(w, "trials             {}", stats.trials)?;
        writeln!(w, "m0 analytical      {m0:.6e}")?;
        writeln!(w, "m0 empirical       {:.6e}  rel {:+.4}", stats.mean, (stats.mean - m0) / m0)?;
        writeln!(w, "var empirical      {var:.6e}")?;
        writeln!(w, "var oracle         {:.6e}  rel {:+.4}", oracle_f[args.k], rel(oracle_f[args.k]))?;
        writeln!(w, "var paper          {:.6e}  rel {:+.4}", paper_f[args.k], rel(paper_f[args.k]))?;
        writeln!(w, "noise weight       oracle {oracle_noise:.6e}  paper {paper_noise:.6e}")?;
        w.flush()
    };
    report().map_err(anyhow::Error::from)?;
    Ok(())
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads.and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}
