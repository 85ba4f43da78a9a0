//! Timing-offset hypothesis search.
//!
//! Every candidate `d` in the configured range is scored by how far the sample
//! moments of the window, read under that hypothesis, sit from the theoretical
//! table. The weighted form divides each residual by the variance of the
//! corresponding `|y|²`; the plain form uses unit weights.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::channel::SampleStream;
use crate::error::{range, Error, Result};
use crate::moments::{fold_moments, received_power, MomentTable, SampleMoments};
use crate::params::SystemConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorId {
    Som,
    Wsom,
    /// Sliding-window energy-ratio baseline.
    Tm,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 3] = [EstimatorId::Wsom, EstimatorId::Som, EstimatorId::Tm];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorId::Som => "som",
            EstimatorId::Wsom => "wsom",
            EstimatorId::Tm => "tm",
        }
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EstimatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "som" => Ok(EstimatorId::Som),
            "wsom" => Ok(EstimatorId::Wsom),
            "tm" => Ok(EstimatorId::Tm),
            other => Err(range("estimator", format!("unknown estimator {other:?}"))),
        }
    }
}

/// Score of one offset candidate with its per-term breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub d: i64,
    pub cost: f64,
    /// One entry per in-block index; `None` where the window had no complete period.
    pub signal_terms: Vec<Option<f64>>,
    /// Leading-noise term, present for `d > 0`.
    pub noise_term: Option<f64>,
}

impl Hypothesis {
    fn from_terms(d: i64, signal_terms: Vec<Option<f64>>, noise_term: Option<f64>) -> Self {
        let cost = sum_terms(&signal_terms, noise_term);
        Self {
            d,
            cost,
            signal_terms,
            noise_term,
        }
    }

    /// Re-add the breakdown in evaluation order.
    pub fn recomputed_cost(&self) -> f64 {
        sum_terms(&self.signal_terms, self.noise_term)
    }
}

fn sum_terms(signal_terms: &[Option<f64>], noise_term: Option<f64>) -> f64 {
    let mut cost = 0.0;
    for t in signal_terms.iter().flatten() {
        cost += t;
    }
    if let Some(t) = noise_term {
        cost += t;
    }
    cost
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub estimator: EstimatorId,
    pub d_hat: i64,
    /// One hypothesis per candidate in ascending `d`.
    pub cost_curve: Vec<Hypothesis>,
}

impl Estimate {
    pub fn cost_min(&self) -> f64 {
        self.cost_at(self.d_hat).expect("d_hat is on the curve")
    }

    pub fn cost_at(&self, d: i64) -> Option<f64> {
        self.cost_curve.iter().find(|h| h.d == d).map(|h| h.cost)
    }
}

/// Lowest cost wins; ties go to the smaller `|d|`, then the smaller `d`.
pub fn select(curve: &[Hypothesis]) -> Option<i64> {
    curve
        .iter()
        .min_by(|a, b| {
            a.cost
                .total_cmp(&b.cost)
                .then(a.d.abs().cmp(&b.d.abs()))
                .then(a.d.cmp(&b.d))
        })
        .map(|h| h.d)
}

/// `residual / weight`, with a zero-variance weight meaning the residual must vanish.
#[inline]
fn weighted(residual: f64, weight: f64) -> f64 {
    if weight > 0.0 {
        residual / weight
    } else if residual == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn check_weights(table: &MomentTable) -> Result<()> {
    if let Some((index, &value)) = table
        .f
        .iter()
        .enumerate()
        .find(|(_, f)| !(f.is_finite() && **f >= 0.0))
    {
        return Err(Error::DegenerateWeight { index, value });
    }
    if !(table.f_noise.is_finite() && table.f_noise >= 0.0) {
        return Err(Error::DegenerateWeight {
            index: table.n_s(),
            value: table.f_noise,
        });
    }
    Ok(())
}

/// Score one hypothesis from its sample moments.
pub fn score_hypothesis(moments: &SampleMoments, table: &MomentTable, weighted_terms: bool) -> Hypothesis {
    let d = moments.d;
    let shift = if d <= 0 { d.unsigned_abs() as usize } else { 0 };
    let signal_terms = moments
        .m_hat
        .iter()
        .enumerate()
        .map(|(k, m)| {
            m.map(|m| {
                let idx = k + shift;
                let residual = (m - table.lookup(idx)).abs();
                if weighted_terms {
                    weighted(residual, table.weight(idx))
                } else {
                    residual
                }
            })
        })
        .collect();
    let noise_term = moments.m_hat_noise.map(|m| {
        let residual = (m - table.sigma_n2).abs();
        if weighted_terms {
            weighted(residual, table.f_noise)
        } else {
            residual
        }
    });
    Hypothesis::from_terms(d, signal_terms, noise_term)
}

fn moment_search(
    stream: &SampleStream,
    cfg: &SystemConfig,
    table: &MomentTable,
    estimator: EstimatorId,
) -> Result<Estimate> {
    let n_s = cfg.n_s();
    if table.n_s() != n_s || table.f.len() != n_s {
        return Err(Error::DimensionMismatch(format!(
            "moment table covers {} indices, block length is {n_s}",
            table.n_s()
        )));
    }
    if stream.is_empty() {
        return Err(Error::DimensionMismatch("empty observation".into()));
    }
    let weighted_terms = estimator == EstimatorId::Wsom;
    if weighted_terms {
        check_weights(table)?;
    }
    let power = received_power(stream);
    // every d <= 0 reads the window from index 0; only the table shift differs
    let unshifted = fold_moments(&power, 0, n_s);
    let mut curve = Vec::with_capacity((cfg.d_range[1] - cfg.d_range[0] + 1) as usize);
    for d in cfg.offsets() {
        let moments = if d <= 0 {
            SampleMoments {
                d,
                ..unshifted.clone()
            }
        } else {
            fold_moments(&power, d, n_s)
        };
        if moments.covered() == 0 {
            return Err(Error::EmptyWindow { d });
        }
        curve.push(score_hypothesis(&moments, table, weighted_terms));
    }
    let d_hat = select(&curve).ok_or_else(|| range("d_range", "no candidate offsets"))?;
    Ok(Estimate {
        estimator,
        d_hat,
        cost_curve: curve,
    })
}

/// Unweighted moment estimator.
pub fn estimate_som(stream: &SampleStream, cfg: &SystemConfig, table: &MomentTable) -> Result<Estimate> {
    moment_search(stream, cfg, table, EstimatorId::Som)
}

/// Inverse-variance weighted moment estimator.
pub fn estimate_wsom(stream: &SampleStream, cfg: &SystemConfig, table: &MomentTable) -> Result<Estimate> {
    moment_search(stream, cfg, table, EstimatorId::Wsom)
}

/// Energy-jump baseline.
///
/// For each boundary candidate `i` the metric is the energy of the `window`
/// samples before `i` divided by the energy of the `window` samples from `i`
/// on, summed over receive antennas. The metric is averaged over all `i` with
/// the same residue modulo `n_s`, and candidate `d` is scored by the residue
/// `d mod n_s`, where a block starts under that hypothesis.
pub fn estimate_tm(stream: &SampleStream, cfg: &SystemConfig, window: usize) -> Result<Estimate> {
    if window == 0 {
        return Err(range("window", "must be at least 1"));
    }
    let len = stream.len();
    if 2 * window > len {
        return Err(Error::WindowTooLong { window, len });
    }
    let n_s = cfg.n_s();
    let mut prefix = vec![0.0; len + 1];
    for t in 0..len {
        let p: f64 = stream.antennas.iter().map(|a| a[t].norm_sqr()).sum();
        prefix[t + 1] = prefix[t] + p;
    }
    let energy = |from: usize, to: usize| (prefix[to] - prefix[from]).max(0.0);
    let mut sum = vec![0.0; n_s];
    let mut hits = vec![0usize; n_s];
    for i in window..=len - window {
        let trailing = energy(i - window, i);
        let leading = energy(i, i + window);
        let ratio = if leading > 0.0 {
            trailing / leading
        } else if trailing == 0.0 {
            1.0
        } else {
            f64::INFINITY
        };
        sum[i % n_s] += ratio;
        hits[i % n_s] += 1;
    }
    let curve: Vec<Hypothesis> = cfg
        .offsets()
        .map(|d| {
            let r = d.rem_euclid(n_s as i64) as usize;
            let metric = if hits[r] > 0 {
                sum[r] / hits[r] as f64
            } else {
                f64::INFINITY
            };
            Hypothesis::from_terms(d, vec![Some(metric)], None)
        })
        .collect();
    let d_hat = select(&curve).ok_or_else(|| range("d_range", "no candidate offsets"))?;
    Ok(Estimate {
        estimator: EstimatorId::Tm,
        d_hat,
        cost_curve: curve,
    })
}

/// Run one estimator by id; TM uses `tm_window` or `n_z`.
pub fn run_estimator(
    id: EstimatorId,
    stream: &SampleStream,
    cfg: &SystemConfig,
    table: &MomentTable,
    tm_window: Option<usize>,
) -> Result<Estimate> {
    match id {
        EstimatorId::Som => estimate_som(stream, cfg, table),
        EstimatorId::Wsom => estimate_wsom(stream, cfg, table),
        EstimatorId::Tm => estimate_tm(stream, cfg, tm_window.unwrap_or(cfg.n_z)),
    }
}

/// Estimate as a CSV record: `estimator_id,true_d,d_hat,cost_min[,cost_<d>...]`.
pub fn estimate_csv_header(cfg: &SystemConfig, with_curve: bool) -> Vec<String> {
    let mut cols: Vec<String> = ["estimator_id", "true_d", "d_hat", "cost_min"]
        .into_iter()
        .map(String::from)
        .collect();
    if with_curve {
        cols.extend(cfg.offsets().map(|d| format!("cost_{d}")));
    }
    cols
}

pub fn estimate_csv_record(estimate: &Estimate, true_d: i64, with_curve: bool) -> Vec<String> {
    let mut row = vec![
        estimate.estimator.to_string(),
        true_d.to_string(),
        estimate.d_hat.to_string(),
        estimate.cost_min().to_string(),
    ];
    if with_curve {
        row.extend(estimate.cost_curve.iter().map(|h| h.cost.to_string()));
    }
    row
}
