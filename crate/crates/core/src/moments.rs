//! Second-order moments of the received samples.
//!
//! Under perfect alignment the power `E|y[k]|²` is periodic in the block length
//! and depends only on which channel taps overlap data at index `k`. This module
//! builds that table, the variance of `|y[k]|²` used as estimator weights, and
//! the sample-mean counterparts computed from an observation window.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{add_noise, apply_channel, draw_taps, SampleStream};
use crate::error::{range, Error, Result};
use crate::params::{ChannelProfile, CorrelationModel, SystemConfig};
use crate::waveform::{SignalMode, Transmitter};

/// Closed form used for the variance of `|y[k]|²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// The published expression, including its noise-only constant `2 σ_n²`.
    PaperFormula,
    /// Exact Gaussian fourth-moment result, confirmed by [`variance_oracle`].
    #[default]
    OracleCorrected,
}

/// Delays `(a_k, b_k)` whose taps see data samples at in-block index `k`,
/// or `None` in the pure-noise tail.
pub fn tap_support(cfg: &SystemConfig, k: usize) -> Option<(usize, usize)> {
    let k = k % cfg.n_s();
    let lo = (k + 1).saturating_sub(cfg.n_x);
    let hi = k.min(cfg.n_h - 1);
    (lo <= hi).then_some((lo, hi))
}

fn support_sums(cfg: &SystemConfig, profile: &ChannelProfile, k: usize) -> (f64, f64) {
    match tap_support(cfg, k) {
        Some((a, b)) => {
            let taps = &profile.pdp[a..=b];
            (taps.iter().sum(), taps.iter().map(|p| p * p).sum())
        }
        None => (0.0, 0.0),
    }
}

/// `M0[k] = σ_s² Σ_{l=a_k}^{b_k} σ²_{h_l} + σ_n²` for one block period.
pub fn theoretical_som(cfg: &SystemConfig, profile: &ChannelProfile) -> Vec<f64> {
    (0..cfg.n_s())
        .map(|k| cfg.sigma_x2 * support_sums(cfg, profile, k).0 + cfg.sigma_n2)
        .collect()
}

/// Per-index variance of `|y[k]|²` and the weight of the noise-only estimate.
///
/// In oracle mode, with `P = σ_s² Σσ²_h` and `Q = Σσ⁴_h` over the support,
/// `Var = P² + 2 σ_s⁴ Q / m_t + 2 P σ_n² + σ_n⁴`; the pure-noise value is `σ_n⁴`.
pub fn som_variance(
    cfg: &SystemConfig,
    profile: &ChannelProfile,
    mode: VarianceMode,
) -> (Vec<f64>, f64) {
    let s2 = cfg.sigma_x2;
    let s4 = s2 * s2;
    let n2 = cfg.sigma_n2;
    let n4 = n2 * n2;
    let f = (0..cfg.n_s())
        .map(|k| {
            let support = tap_support(cfg, k);
            let (sum, sum_sq) = support_sums(cfg, profile, k);
            match mode {
                VarianceMode::PaperFormula => match support {
                    Some(_) => {
                        let cross = sum * sum - sum_sq;
                        3.25 * s4 * sum_sq + 2.5 * s4 * cross + 2.0 * n2 * s2 * sum + n4
                            - 0.25 * s2 * sum * sum
                    }
                    None => 2.0 * n2,
                },
                VarianceMode::OracleCorrected => {
                    let p = s2 * sum;
                    p * p + 2.0 * s4 * sum_sq / cfg.m_t as f64 + 2.0 * p * n2 + n4
                }
            }
        })
        .collect();
    let f_noise = match mode {
        VarianceMode::PaperFormula => 2.0 * n2,
        VarianceMode::OracleCorrected => n4,
    };
    (f, f_noise)
}

/// Theoretical moments and weights over one block period.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTable {
    pub m0: Vec<f64>,
    pub f: Vec<f64>,
    pub f_noise: f64,
    pub sigma_n2: f64,
    pub variance_mode: VarianceMode,
    pub cfg: SystemConfig,
}

impl MomentTable {
    pub fn build(cfg: &SystemConfig, profile: &ChannelProfile, mode: VarianceMode) -> Self {
        let (f, f_noise) = som_variance(cfg, profile, mode);
        Self {
            m0: theoretical_som(cfg, profile),
            f,
            f_noise,
            sigma_n2: cfg.sigma_n2,
            variance_mode: mode,
            cfg: cfg.clone(),
        }
    }

    pub fn n_s(&self) -> usize {
        self.m0.len()
    }

    /// Periodic lookup `M0[k mod n_s]`.
    #[inline]
    pub fn lookup(&self, k: usize) -> f64 {
        self.m0[k % self.m0.len()]
    }

    #[inline]
    pub fn weight(&self, k: usize) -> f64 {
        self.f[k % self.f.len()]
    }

    /// Replace all weights by one, turning the weighted objective into the plain one.
    pub fn unweighted(&self) -> Self {
        Self {
            f: vec![1.0; self.f.len()],
            f_noise: 1.0,
            ..self.clone()
        }
    }
}

/// Mean and unbiased variance of a scalar sample, mergeable across chunks.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OracleStats {
    pub trials: u64,
    pub mean: f64,
    m2: f64,
}

impl OracleStats {
    pub fn push(&mut self, x: f64) {
        self.trials += 1;
        let delta = x - self.mean;
        self.mean += delta / self.trials as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(self, other: Self) -> Self {
        if self.trials == 0 {
            return other;
        }
        if other.trials == 0 {
            return self;
        }
        let n = self.trials + other.trials;
        let delta = other.mean - self.mean;
        Self {
            trials: n,
            mean: self.mean + delta * other.trials as f64 / n as f64,
            m2: self.m2
                + other.m2
                + delta * delta * (self.trials as f64 * other.trials as f64) / n as f64,
        }
    }

    pub fn variance(&self) -> f64 {
        if self.trials < 2 {
            0.0
        } else {
            self.m2 / (self.trials - 1) as f64
        }
    }
}

const ORACLE_CHUNK: u64 = 4096;

/// Monte Carlo statistics of `|y[k]|²` for every in-block index, each trial an
/// independent aligned block on receive antenna 0 with fresh taps, data and noise.
///
/// Taps are drawn block-static: a single-sample marginal does not depend on
/// the tap time correlation.
pub fn block_statistics(
    cfg: &SystemConfig,
    profile: &ChannelProfile,
    signal: SignalMode,
    trials: u64,
    seed: u64,
) -> Result<Vec<OracleStats>> {
    if trials < 2 {
        return Err(range("trials", "need at least two realizations"));
    }
    let single = SystemConfig {
        m_r: 1,
        n_blocks: 1,
        ..cfg.clone()
    };
    let profile = ChannelProfile {
        correlation_model: CorrelationModel::BlockStatic,
        ..profile.clone()
    };
    profile.validate(&single)?;
    let tx = Transmitter::new(&single, signal)?;
    let n_s = single.n_s();
    let chunks = trials.div_ceil(ORACLE_CHUNK);
    let partials: Vec<Vec<OracleStats>> = (0..chunks)
        .into_par_iter()
        .map(|chunk| -> Result<Vec<OracleStats>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk);
            let mut stats = vec![OracleStats::default(); n_s];
            let count = ORACLE_CHUNK.min(trials - chunk * ORACLE_CHUNK);
            for _ in 0..count {
                let sent = tx.burst(&mut rng, single.m_t, 1);
                let taps = draw_taps(&profile, &single, &mut rng, n_s);
                let mut y = apply_channel(&sent, &taps, &single)?;
                add_noise(&mut y, single.sigma_n2, &mut rng);
                for (s, x) in stats.iter_mut().zip(&y[0]) {
                    s.push(x.norm_sqr());
                }
            }
            Ok(stats)
        })
        .collect::<Result<_>>()?;
    Ok(partials.into_iter().fold(vec![OracleStats::default(); n_s], |acc, part| {
        acc.into_iter().zip(part).map(|(a, b)| a.merge(b)).collect()
    }))
}

/// Brute-force mean and variance of `|y[k]|²` under perfect alignment with the
/// Gaussian data model; ground truth for [`som_variance`].
pub fn variance_oracle(
    cfg: &SystemConfig,
    profile: &ChannelProfile,
    k: usize,
    trials: u64,
    seed: u64,
) -> Result<OracleStats> {
    if k >= cfg.n_s() {
        return Err(range("k", format!("must be below n_s = {}", cfg.n_s())));
    }
    Ok(block_statistics(cfg, profile, SignalMode::Gaussian, trials, seed)?[k])
}

/// Sample-mean moments of an observation window under one offset hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMoments {
    pub d: i64,
    /// `None` where index `k` has no complete period in the window.
    pub m_hat: Vec<Option<f64>>,
    /// Periods averaged for each `k` (per antenna).
    pub counts: Vec<usize>,
    /// Mean power of the leading `d` samples, present only for `d > 0`.
    pub m_hat_noise: Option<f64>,
    pub noise_count: usize,
}

impl SampleMoments {
    pub fn covered(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

/// `|y_j[t]|²` for each receive antenna.
pub fn received_power(stream: &SampleStream) -> Vec<Vec<f64>> {
    stream
        .antennas
        .iter()
        .map(|a| a.iter().map(Complex64::norm_sqr).collect())
        .collect()
}

/// Fold precomputed per-antenna powers into per-index moments for hypothesis `d`.
pub(crate) fn fold_moments(power: &[Vec<f64>], d: i64, n_s: usize) -> SampleMoments {
    let l = power.first().map_or(0, Vec::len) as i64;
    let m_r = power.len() as f64;
    let shift = d.max(0);
    let mut m_hat = Vec::with_capacity(n_s);
    let mut counts = Vec::with_capacity(n_s);
    for k in 0..n_s {
        let count = ((l - k as i64 - shift + 1).max(0) as usize) / n_s;
        counts.push(count);
        if count == 0 {
            m_hat.push(None);
            continue;
        }
        let start = k + shift as usize;
        let mut acc = 0.0;
        for p in power {
            acc += p[start..].iter().step_by(n_s).take(count).sum::<f64>();
        }
        m_hat.push(Some(acc / (m_r * count as f64)));
    }
    let (m_hat_noise, noise_count) = if d > 0 {
        let count = (d as usize).min(l as usize);
        let acc: f64 = power.iter().map(|p| p[..count].iter().sum::<f64>()).sum();
        ((count > 0).then(|| acc / (m_r * count as f64)), count)
    } else {
        (None, 0)
    };
    SampleMoments {
        d,
        m_hat,
        counts,
        m_hat_noise,
        noise_count,
    }
}

/// Sample-mean second-order moments for hypothesis `d`, averaged over receive antennas.
///
/// For `d > 0` index `k` averages `|y[k + d + r n_s]|²` over
/// `⌊(L - k - d + 1) / n_s⌋` periods and the first `d` samples give the noise
/// estimate; for `d <= 0` the count is `⌊(L - k + 1) / n_s⌋` and there is no shift.
pub fn sample_som(stream: &SampleStream, d: i64, cfg: &SystemConfig) -> Result<SampleMoments> {
    if !cfg.contains_offset(d) {
        return Err(Error::OffsetRange {
            min: d,
            max: d,
            limit: cfg.n_s() as i64 - 1,
        });
    }
    let moments = fold_moments(&received_power(stream), d, cfg.n_s());
    if moments.covered() == 0 {
        return Err(Error::EmptyWindow { d });
    }
    Ok(moments)
}
