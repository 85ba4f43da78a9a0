//! Monte Carlo experiment runner.
//!
//! Each grid point draws `trials` independent realizations: a uniform offset
//! from the search range, a fresh channel and data burst, and one estimate per
//! configured estimator. Trial `t` at point `p` always uses ChaCha stream
//! `(p << 32) | t` of the master seed, so results do not depend on thread count
//! or scheduling; aggregation runs sequentially in trial order.

use std::fmt;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::simulate_stream;
use crate::error::{range, Error, Result};
use crate::estimators::{run_estimator, EstimatorId};
use crate::moments::{MomentTable, VarianceMode};
use crate::params::{exponential_pdp_unit_power, ChannelProfile, SystemConfig, REFERENCE_PDP_BETA};
use crate::waveform::{SignalMode, Transmitter};

/// Tag written in the first column of every results row.
pub const RESULTS_SCHEMA: &str = "zpsync.results.v1";
/// Errors beyond ±PMF_SUPPORT land in the overflow bucket.
pub const PMF_SUPPORT: i64 = 10;

/// Noise power for a given Eb/N0.
///
/// Convention: the received energy per data sample is `sigma_x2 * p_h`, the
/// zero padding dilutes it by `n_x / n_s`, and each data sample carries
/// `bits_per_symbol` bits, so
/// `σ_n² = σ_x² p_h (n_x / n_s) / (bits_per_symbol · 10^(Eb/N0 / 10))`.
pub fn ebn0_to_sigma_n2(ebn0_db: f64, cfg: &SystemConfig, p_h: f64, bits_per_symbol: f64) -> f64 {
    let dilution = cfg.n_x as f64 / cfg.n_s() as f64;
    cfg.sigma_x2 * p_h * dilution / (bits_per_symbol * 10f64.powf(ebn0_db / 10.0))
}

/// Scale each tap independently by `1 - alpha` or `1 + alpha` with equal probability.
pub fn pdp_mismatch<R: Rng + ?Sized>(
    profile: &ChannelProfile,
    alpha_err: f64,
    rng: &mut R,
) -> Result<ChannelProfile> {
    if !(0.0..1.0).contains(&alpha_err) {
        return Err(range("pdp_error_alpha", format!("must lie in [0, 1), got {alpha_err}")));
    }
    let pdp = profile
        .pdp
        .iter()
        .map(|&p| if rng.random::<bool>() { p * (1.0 + alpha_err) } else { p * (1.0 - alpha_err) })
        .collect();
    Ok(profile.with_pdp(pdp))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    Ebn0Db,
    DopplerHz,
    NBlocks,
    NTaps,
    PdpErrorAlpha,
}

impl SweepVariable {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepVariable::Ebn0Db => "ebn0_db",
            SweepVariable::DopplerHz => "doppler_hz",
            SweepVariable::NBlocks => "n_blocks",
            SweepVariable::NTaps => "n_taps",
            SweepVariable::PdpErrorAlpha => "pdp_error_alpha",
        }
    }
}

impl fmt::Display for SweepVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The canonical experiment set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Snr,
    Doppler,
    Blocks,
    Taps,
    Pdp,
    Pmf,
    Mse,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Snr => "snr",
            ExperimentKind::Doppler => "doppler",
            ExperimentKind::Blocks => "blocks",
            ExperimentKind::Taps => "taps",
            ExperimentKind::Pdp => "pdp",
            ExperimentKind::Pmf => "pmf",
            ExperimentKind::Mse => "mse",
        }
    }

    pub fn sweep(&self) -> SweepVariable {
        match self {
            ExperimentKind::Snr | ExperimentKind::Mse | ExperimentKind::Pmf => SweepVariable::Ebn0Db,
            ExperimentKind::Doppler => SweepVariable::DopplerHz,
            ExperimentKind::Blocks => SweepVariable::NBlocks,
            ExperimentKind::Taps => SweepVariable::NTaps,
            ExperimentKind::Pdp => SweepVariable::PdpErrorAlpha,
        }
    }

    pub fn default_grid(&self) -> Vec<f64> {
        match self {
            ExperimentKind::Snr | ExperimentKind::Mse => vec![-10.0, -5.0, 0.0, 5.0, 10.0, 15.0],
            ExperimentKind::Pmf => vec![15.0],
            ExperimentKind::Doppler => vec![0.0, 50.0, 150.0, 500.0, 1500.0],
            ExperimentKind::Blocks => vec![2.0, 5.0, 10.0, 20.0, 50.0],
            ExperimentKind::Taps => vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0],
            ExperimentKind::Pdp => vec![0.0, 0.2, 0.4, 0.6, 0.8],
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            ExperimentKind::Snr,
            ExperimentKind::Doppler,
            ExperimentKind::Blocks,
            ExperimentKind::Taps,
            ExperimentKind::Pdp,
            ExperimentKind::Pmf,
            ExperimentKind::Mse,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| range("experiment", format!("unknown experiment {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    /// Base link; `sigma_n2` is always recomputed from Eb/N0.
    pub base: SystemConfig,
    pub profile: ChannelProfile,
    pub signal: SignalMode,
    /// Eb/N0 for sweeps over other variables.
    pub ebn0_db: f64,
    pub sweep: SweepVariable,
    pub grid: Vec<f64>,
    pub trials: usize,
    pub estimators: Vec<EstimatorId>,
    pub master_seed: u64,
    pub variance_mode: VarianceMode,
    /// Decay of the unit-power exponential profile rebuilt by tap-count sweeps.
    pub pdp_beta: f64,
    /// Energy window of the baseline; `n_z` when absent.
    pub tm_window: Option<usize>,
}

impl ExperimentSpec {
    /// Reference link at 15 dB with 1000 trials per point and all three estimators.
    pub fn canonical(kind: ExperimentKind, base: SystemConfig, profile: ChannelProfile) -> Self {
        Self {
            name: kind.as_str().to_string(),
            base,
            profile,
            signal: SignalMode::Qam(128),
            ebn0_db: 15.0,
            sweep: kind.sweep(),
            grid: kind.default_grid(),
            trials: 1000,
            estimators: EstimatorId::ALL.to_vec(),
            master_seed: 0,
            variance_mode: VarianceMode::OracleCorrected,
            pdp_beta: REFERENCE_PDP_BETA,
            tm_window: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(range("grid", "must contain at least one value"));
        }
        if self.trials == 0 {
            return Err(range("trials", "must be at least 1"));
        }
        if self.estimators.is_empty() {
            return Err(range("estimators", "must name at least one estimator"));
        }
        for index in 0..self.grid.len() {
            self.point(index)?;
        }
        Ok(())
    }

    /// Resolve grid point `index` into a concrete link.
    pub fn point(&self, index: usize) -> Result<PointSetup> {
        let value = *self
            .grid
            .get(index)
            .ok_or_else(|| range("grid", format!("no point {index}")))?;
        let mut cfg = self.base.clone();
        let mut profile = self.profile.clone();
        let mut ebn0_db = self.ebn0_db;
        let mut alpha_err = 0.0;
        let count = |field: &'static str| -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(range(field, format!("sweep value {value} is not a positive integer")))
            }
        };
        match self.sweep {
            SweepVariable::Ebn0Db => ebn0_db = value,
            SweepVariable::DopplerHz => profile.f_d = value,
            SweepVariable::NBlocks => cfg.n_blocks = count("N")?,
            SweepVariable::NTaps => {
                cfg.n_h = count("n_h")?;
                profile = ChannelProfile {
                    pdp: exponential_pdp_unit_power(cfg.n_h, self.pdp_beta)?.pdp,
                    ..profile
                };
            }
            SweepVariable::PdpErrorAlpha => {
                if !(0.0..1.0).contains(&value) {
                    return Err(range("pdp_error_alpha", format!("{value} outside [0, 1)")));
                }
                alpha_err = value;
            }
        }
        if !ebn0_db.is_finite() {
            return Err(range("ebn0_db", "must be finite"));
        }
        cfg.sigma_n2 = ebn0_to_sigma_n2(ebn0_db, &cfg, profile.total_power(), self.signal.bits_per_symbol());
        let cfg = cfg.validate()?;
        profile.validate(&cfg)?;
        let table = MomentTable::build(&cfg, &profile, self.variance_mode);
        let tx = Transmitter::new(&cfg, self.signal)?;
        Ok(PointSetup {
            index,
            value,
            cfg,
            profile,
            alpha_err,
            table,
            tx,
            variance_mode: self.variance_mode,
            estimators: self.estimators.clone(),
            tm_window: self.tm_window,
        })
    }
}

/// One fully resolved grid point.
#[derive(Debug, Clone)]
pub struct PointSetup {
    pub index: usize,
    pub value: f64,
    pub cfg: SystemConfig,
    /// Profile that drives the channel.
    pub profile: ChannelProfile,
    /// Per-trial PDP error applied to the receiver's copy of the profile.
    pub alpha_err: f64,
    /// Receiver table for the exact profile.
    pub table: MomentTable,
    pub tx: Transmitter,
    pub variance_mode: VarianceMode,
    pub estimators: Vec<EstimatorId>,
    pub tm_window: Option<usize>,
}

/// Identifies the RNG stream of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSeed {
    pub master: u64,
    pub point: u32,
    pub trial: u32,
}

impl TrialSeed {
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(((self.point as u64) << 32) | self.trial as u64);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOutcome {
    pub estimator: EstimatorId,
    pub d_hat: i64,
    pub cost_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: TrialSeed,
    pub d: i64,
    pub results: Vec<EstimatorOutcome>,
    /// Wall-clock time; excluded from every deterministic output.
    #[serde(skip)]
    pub elapsed: Duration,
}

impl TrialOutcome {
    pub fn error_of(&self, id: EstimatorId) -> Option<i64> {
        self.results.iter().find(|r| r.estimator == id).map(|r| r.d_hat - self.d)
    }
}

/// Simulate one realization at `point` and run every configured estimator on it.
pub fn run_trial(point: &PointSetup, seed: TrialSeed) -> Result<TrialOutcome> {
    let start = Instant::now();
    let mut rng = seed.rng();
    let d = rng.random_range(point.cfg.d_range[0]..=point.cfg.d_range[1]);
    let mismatched;
    let table = if point.alpha_err > 0.0 {
        let believed = pdp_mismatch(&point.profile, point.alpha_err, &mut rng)?;
        mismatched = MomentTable::build(&point.cfg, &believed, point.variance_mode);
        &mismatched
    } else {
        &point.table
    };
    let stream = simulate_stream(&point.cfg, &point.profile, &point.tx, d, &mut rng)?;
    let results = point
        .estimators
        .iter()
        .map(|&id| {
            run_estimator(id, &stream, &point.cfg, table, point.tm_window).map(|e| EstimatorOutcome {
                estimator: id,
                d_hat: e.d_hat,
                cost_min: e.cost_min(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(TrialOutcome {
        seed,
        d,
        results,
        elapsed: start.elapsed(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub estimator: EstimatorId,
    pub trials: usize,
    pub lock_in: f64,
    pub mse: f64,
    /// Probability of each error in `-PMF_SUPPORT..=PMF_SUPPORT`.
    pub pmf: Vec<f64>,
    pub pmf_overflow: f64,
}

impl EstimatorStats {
    pub fn pmf_at(&self, error: i64) -> f64 {
        if error.abs() > PMF_SUPPORT {
            return 0.0;
        }
        self.pmf[(error + PMF_SUPPORT) as usize]
    }

    /// Two-sigma binomial half-width of the lock-in estimate.
    pub fn lock_in_margin(&self) -> f64 {
        2.0 * (self.lock_in * (1.0 - self.lock_in) / self.trials as f64).sqrt()
    }
}

/// Lock-in probability, mean squared error and error PMF per estimator.
pub fn aggregate(outcomes: &[TrialOutcome], estimators: &[EstimatorId]) -> Vec<EstimatorStats> {
    estimators
        .iter()
        .map(|&id| {
            let errors: Vec<i64> = outcomes.iter().filter_map(|o| o.error_of(id)).collect();
            let n = errors.len();
            let mut counts = vec![0usize; (2 * PMF_SUPPORT + 1) as usize];
            let mut overflow = 0usize;
            let mut hits = 0usize;
            let mut squared = 0.0;
            for &e in &errors {
                if e == 0 {
                    hits += 1;
                }
                squared += (e * e) as f64;
                if e.abs() <= PMF_SUPPORT {
                    counts[(e + PMF_SUPPORT) as usize] += 1;
                } else {
                    overflow += 1;
                }
            }
            let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
            EstimatorStats {
                estimator: id,
                trials: n,
                lock_in: frac(hits),
                mse: if n == 0 { 0.0 } else { squared / n as f64 },
                pmf: counts.into_iter().map(frac).collect(),
                pmf_overflow: frac(overflow),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub sweep_value: f64,
    pub stats: Vec<EstimatorStats>,
    #[serde(skip)]
    pub runtime: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub points: Vec<PointResult>,
    /// Set when a trial failed; the last point then covers only finished trials.
    pub partial: bool,
    pub failures: Vec<String>,
    #[serde(skip)]
    pub runtime: Duration,
}

impl ExperimentResult {
    pub fn stats(&self, point: usize, id: EstimatorId) -> Option<&EstimatorStats> {
        self.points.get(point)?.stats.iter().find(|s| s.estimator == id)
    }
}

/// Run every trial at one grid point, in parallel, returned in trial order.
pub fn run_point(spec: &ExperimentSpec, point: &PointSetup) -> Vec<std::result::Result<TrialOutcome, String>> {
    (0..spec.trials)
        .into_par_iter()
        .map(|trial| {
            let seed = TrialSeed {
                master: spec.master_seed,
                point: point.index as u32,
                trial: trial as u32,
            };
            match catch_unwind(AssertUnwindSafe(|| run_trial(point, seed))) {
                Ok(Ok(outcome)) => Ok(outcome),
                Ok(Err(e)) => Err(format!("point {} trial {trial}: {e}", point.index)),
                Err(panic) => {
                    let msg = panic
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| panic.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "panic".into());
                    Err(format!("point {} trial {trial} panicked: {msg}", point.index))
                }
            }
        })
        .collect()
}

/// Run the whole sweep. Configuration problems fail up front; trial failures
/// stop the sweep after the current point and mark the result partial.
pub fn run_experiment(spec: &ExperimentSpec, threads: Option<usize>) -> Result<ExperimentResult> {
    spec.validate()?;
    let run = || -> Result<ExperimentResult> {
        let start = Instant::now();
        let mut points = Vec::with_capacity(spec.grid.len());
        let mut failures = Vec::new();
        for index in 0..spec.grid.len() {
            let setup = spec.point(index)?;
            let point_start = Instant::now();
            let trials = run_point(spec, &setup);
            let mut outcomes = Vec::with_capacity(trials.len());
            for t in trials {
                match t {
                    Ok(o) => outcomes.push(o),
                    Err(e) => failures.push(e),
                }
            }
            points.push(PointResult {
                sweep_value: setup.value,
                stats: aggregate(&outcomes, &spec.estimators),
                runtime: point_start.elapsed(),
            });
            if !failures.is_empty() {
                break;
            }
        }
        Ok(ExperimentResult {
            spec: spec.clone(),
            partial: !failures.is_empty(),
            points,
            failures,
            runtime: start.elapsed(),
        })
    };
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Io(e.to_string()))?
            .install(run),
        None => run(),
    }
}

pub fn results_header() -> Vec<String> {
    let mut cols: Vec<String> = [
        "schema",
        "experiment",
        "estimator",
        "sweep_var",
        "sweep_value",
        "trials",
        "lock_in",
        "mse",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    cols.extend((-PMF_SUPPORT..=PMF_SUPPORT).map(|e| format!("pmf_{e}")));
    cols.push("pmf_overflow".into());
    cols.push("status".into());
    cols
}

/// Results table: one row per grid point and estimator.
pub fn write_results_csv<W: Write>(result: &ExperimentResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(results_header()).map_err(csv_err)?;
    let last = result.points.len().saturating_sub(1);
    for (i, point) in result.points.iter().enumerate() {
        let status = if result.partial && i == last { "partial" } else { "ok" };
        for s in &point.stats {
            let mut row = vec![
                RESULTS_SCHEMA.to_string(),
                result.spec.name.clone(),
                s.estimator.to_string(),
                result.spec.sweep.to_string(),
                point.sweep_value.to_string(),
                s.trials.to_string(),
                s.lock_in.to_string(),
                s.mse.to_string(),
            ];
            row.extend(s.pmf.iter().map(f64::to_string));
            row.push(s.pmf_overflow.to_string());
            row.push(status.to_string());
            w.write_record(row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Build identifier captured at compile time.
pub fn build_describe() -> &'static str {
    env!("ZPSYNC_GIT_DESCRIBE")
}

/// JSON manifest accompanying a results file.
pub fn manifest(result: &ExperimentResult) -> serde_json::Value {
    serde_json::json!({
        "schema": RESULTS_SCHEMA,
        "experiment": result.spec.name,
        "spec": result.spec,
        "master_seed": result.spec.master_seed,
        "build": build_describe(),
        "partial": result.partial,
        "failures": result.failures,
        "runtime_s": result.runtime.as_secs_f64(),
        "point_runtime_s": result.points.iter().map(|p| p.runtime.as_secs_f64()).collect::<Vec<_>>(),
    })
}
