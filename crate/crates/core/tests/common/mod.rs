//! Straight-line reference implementations shared by the integration tests.
#![allow(dead_code)]

use num_complex::Complex64;
use rand::Rng;

use zpsync::moments::VarianceMode;
use zpsync::params::{ChannelProfile, SystemConfig};

/// Theoretical moment at in-block index `k`, summing the taps that reach it.
pub fn m0(cfg: &SystemConfig, profile: &ChannelProfile, k: usize) -> f64 {
    let (s, _) = reach(cfg, profile, k);
    cfg.sigma_x2 * s + cfg.sigma_n2
}

/// Sum and sum of squares of the tap powers `l` with `0 <= k - l < n_x`.
fn reach(cfg: &SystemConfig, profile: &ChannelProfile, k: usize) -> (f64, f64) {
    let mut s = 0.0;
    let mut q = 0.0;
    for (l, &p) in profile.pdp.iter().enumerate() {
        if l <= k && k - l < cfg.n_x {
            s += p;
            q += p * p;
        }
    }
    (s, q)
}

/// Variance of `|y[k]|²` and the noise-estimate weight.
///
/// Oracle: `y = Σ a_n + w` with independent circular `a_n = h s`, so
/// `E|Σa|⁴ = 2(Σ E|a|²)² + Σ (E|a|⁴ - 2 (E|a|²)²)` and `E|a|⁴ = 4 σ_h⁴ σ_s⁴`.
pub fn variance(cfg: &SystemConfig, profile: &ChannelProfile, k: usize, mode: VarianceMode) -> f64 {
    let (s, q) = reach(cfg, profile, k);
    let n2 = cfg.sigma_n2;
    match mode {
        VarianceMode::OracleCorrected => {
            let per_antenna = cfg.sigma_x2 / cfg.m_t as f64;
            let mut second = 0.0;
            let mut excess = 0.0;
            for _ in 0..cfg.m_t {
                for (l, &p) in profile.pdp.iter().enumerate() {
                    if l <= k && k - l < cfg.n_x {
                        let e2 = p * per_antenna;
                        second += e2;
                        excess += 4.0 * e2 * e2 - 2.0 * e2 * e2;
                    }
                }
            }
            let fourth = 2.0 * second * second + excess + 4.0 * second * n2 + 2.0 * n2 * n2;
            let mean = second + n2;
            fourth - mean * mean
        }
        VarianceMode::PaperFormula => {
            if k >= cfg.n_x + cfg.n_h - 1 {
                return 2.0 * n2;
            }
            let s2 = cfg.sigma_x2;
            let s4 = s2 * s2;
            13.0 / 4.0 * s4 * q + 5.0 / 2.0 * s4 * (s * s - q) + 2.0 * n2 * s2 * s + n2 * n2 - 0.25 * s2 * s * s
        }
    }
}

pub fn noise_weight(cfg: &SystemConfig, mode: VarianceMode) -> f64 {
    match mode {
        VarianceMode::OracleCorrected => cfg.sigma_n2 * cfg.sigma_n2,
        VarianceMode::PaperFormula => 2.0 * cfg.sigma_n2,
    }
}

/// Objective of hypothesis `d`, written out term by term with no folding or reuse.
/// `weights = None` gives the unweighted objective.
pub fn brute_cost(
    y: &[Vec<Complex64>],
    cfg: &SystemConfig,
    profile: &ChannelProfile,
    d: i64,
    weights: Option<VarianceMode>,
) -> f64 {
    let n_s = cfg.n_s();
    let l_obs = y[0].len();
    let m_r = y.len() as f64;
    let weight = |k: usize| weights.map_or(1.0, |m| variance(cfg, profile, k % n_s, m));
    let mut cost = 0.0;
    for k in 0..n_s {
        let (start, count, target) = if d <= 0 {
            let count = (l_obs as i64 - k as i64 + 1).div_euclid(n_s as i64);
            (k, count, k + d.unsigned_abs() as usize)
        } else {
            let count = (l_obs as i64 - k as i64 - d + 1).div_euclid(n_s as i64);
            (k + d as usize, count, k)
        };
        if count <= 0 {
            continue;
        }
        let mut total = 0.0;
        for antenna in y {
            for r in 0..count as usize {
                total += antenna[start + r * n_s].norm_sqr();
            }
        }
        let m_hat = total / (m_r * count as f64);
        cost += (m_hat - m0(cfg, profile, target % n_s)).abs() / weight(target);
    }
    if d > 0 {
        let mut total = 0.0;
        for antenna in y {
            total += antenna[..d as usize].iter().map(|x| x.norm_sqr()).sum::<f64>();
        }
        let m_noise = total / (m_r * d as f64);
        let w = weights.map_or(1.0, |m| noise_weight(cfg, m));
        cost += (m_noise - cfg.sigma_n2).abs() / w;
    }
    cost
}

/// Arbitrary complex samples with uneven magnitudes; the objectives are
/// algebraic in `|y|²`, so no statistical model is needed.
pub fn random_antennas<R: Rng>(rng: &mut R, m_r: usize, len: usize) -> Vec<Vec<Complex64>> {
    (0..m_r)
        .map(|_| {
            (0..len)
                .map(|_| {
                    let scale = rng.random_range(0.2..3.0);
                    Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * scale
                })
                .collect()
        })
        .collect()
}

/// Relative difference, with an absolute floor for values near zero.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
