//! System and channel configuration.
//!
//! All powers are linear. Conversions from Eb/N0 live in [`crate::harness`].

use serde::{Deserialize, Serialize};

use crate::error::{range, Error, Result};
use crate::waveform::SignalMode;

/// Decay rate of the reference exponential power-delay profile.
pub const REFERENCE_PDP_BETA: f64 = 0.5;
/// Scale of the reference exponential power-delay profile (ten taps, unit total power).
pub const REFERENCE_PDP_ALPHA: f64 = 1.0 / 2.5244;

/// Block, antenna and observation parameters of a ZP-OFDM link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Data samples per block.
    pub n_x: usize,
    /// Zero-padded samples per block.
    pub n_z: usize,
    /// Channel taps.
    pub n_h: usize,
    pub m_t: usize,
    pub m_r: usize,
    /// Total transmit sample power, split evenly over the transmit antennas.
    pub sigma_x2: f64,
    /// Noise power per receive sample.
    pub sigma_n2: f64,
    /// Number of blocks in the observation window.
    #[serde(rename = "N")]
    pub n_blocks: usize,
    /// Inclusive offset search range `[min, max]`.
    pub d_range: [i64; 2],
}

impl SystemConfig {
    /// 128 data samples, 12 zero-pad samples, 10 taps, SISO, N = 10, D = [-30, 30].
    pub fn reference() -> Self {
        Self {
            n_x: 128,
            n_z: 12,
            n_h: 10,
            m_t: 1,
            m_r: 1,
            sigma_x2: 1.0,
            sigma_n2: 0.1,
            n_blocks: 10,
            d_range: [-30, 30],
        }
    }

    pub fn n_s(&self) -> usize {
        self.n_x + self.n_z
    }

    /// Observation length in samples.
    pub fn l(&self) -> usize {
        self.n_blocks * self.n_s()
    }

    /// First index of the pure-noise tail of each block.
    pub fn noise_start(&self) -> usize {
        self.n_x + self.n_h - 1
    }

    pub fn offsets(&self) -> impl Iterator<Item = i64> + Clone {
        self.d_range[0]..=self.d_range[1]
    }

    pub fn contains_offset(&self, d: i64) -> bool {
        (self.d_range[0]..=self.d_range[1]).contains(&d)
    }

    /// Check every invariant; returns the config unchanged when they hold.
    pub fn validate(self) -> Result<Self> {
        for (field, value) in [
            ("n_x", self.n_x),
            ("n_z", self.n_z),
            ("n_h", self.n_h),
            ("m_t", self.m_t),
            ("m_r", self.m_r),
            ("N", self.n_blocks),
        ] {
            if value < 1 {
                return Err(range(field, "must be at least 1"));
            }
        }
        if self.n_z < self.n_h {
            return Err(Error::IsiViolation {
                n_z: self.n_z,
                n_h: self.n_h,
            });
        }
        if !(self.sigma_x2.is_finite() && self.sigma_x2 > 0.0) {
            return Err(range("sigma_x2", format!("must be positive, got {}", self.sigma_x2)));
        }
        // Zero noise is accepted as the noiseless limit.
        if !(self.sigma_n2.is_finite() && self.sigma_n2 >= 0.0) {
            return Err(range(
                "sigma_n2",
                format!("must be non-negative, got {}", self.sigma_n2),
            ));
        }
        let [min, max] = self.d_range;
        if min > max {
            return Err(range("d_range", format!("empty range [{min}, {max}]")));
        }
        let limit = self.n_s() as i64 - 1;
        if min < -limit || max > limit {
            return Err(Error::OffsetRange { min, max, limit });
        }
        Ok(self)
    }
}

/// Free-function form of [`SystemConfig::validate`].
pub fn validate_config(cfg: SystemConfig) -> Result<SystemConfig> {
    cfg.validate()
}

/// Time correlation of each channel tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationModel {
    /// Constant within a block, independent across blocks.
    BlockStatic,
    /// Clarke/Jakes autocorrelation `J0(2π f_D m / f_sa)`, continuous across blocks.
    Jakes,
}

/// Power-delay profile and Doppler parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub pdp: Vec<f64>,
    /// Maximum Doppler spread in Hz.
    #[serde(rename = "f_D")]
    pub f_d: f64,
    /// Sampling rate in Hz.
    pub f_sa: f64,
    pub correlation_model: CorrelationModel,
}

impl ChannelProfile {
    /// Reference ten-tap exponential profile at 150 Hz Doppler, 1 GHz sampling.
    pub fn reference() -> Self {
        exponential_pdp(10, REFERENCE_PDP_ALPHA, REFERENCE_PDP_BETA)
            .expect("reference profile is valid")
    }

    pub fn n_h(&self) -> usize {
        self.pdp.len()
    }

    /// Total channel power `p_h`.
    pub fn total_power(&self) -> f64 {
        self.pdp.iter().sum()
    }

    pub fn with_pdp(&self, pdp: Vec<f64>) -> Self {
        Self { pdp, ..self.clone() }
    }

    pub fn validate(&self, cfg: &SystemConfig) -> Result<()> {
        if self.pdp.len() != cfg.n_h {
            return Err(Error::DimensionMismatch(format!(
                "pdp has {} taps but n_h = {}",
                self.pdp.len(),
                cfg.n_h
            )));
        }
        if let Some(bad) = self.pdp.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(range("pdp", format!("tap power {bad} is not a non-negative number")));
        }
        if !(self.f_d.is_finite() && self.f_d >= 0.0) {
            return Err(range("f_D", format!("must be non-negative, got {}", self.f_d)));
        }
        if !(self.f_sa.is_finite() && self.f_sa > 0.0) {
            return Err(range("f_sa", format!("must be positive, got {}", self.f_sa)));
        }
        Ok(())
    }
}

/// `pdp[l] = alpha * exp(-beta * l)`. The result is not renormalized.
pub fn exponential_pdp(n_h: usize, alpha: f64, beta: f64) -> Result<ChannelProfile> {
    if n_h == 0 {
        return Err(range("n_h", "must be at least 1"));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(range("alpha", format!("must be positive, got {alpha}")));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(range("beta", format!("must be non-negative, got {beta}")));
    }
    Ok(ChannelProfile {
        pdp: (0..n_h).map(|l| alpha * (-beta * l as f64).exp()).collect(),
        f_d: 150.0,
        f_sa: 1e9,
        correlation_model: CorrelationModel::Jakes,
    })
}

/// Exponential profile with `alpha` chosen so the taps sum to one.
pub fn exponential_pdp_unit_power(n_h: usize, beta: f64) -> Result<ChannelProfile> {
    if n_h == 0 {
        return Err(range("n_h", "must be at least 1"));
    }
    let norm: f64 = (0..n_h).map(|l| (-beta * l as f64).exp()).sum();
    exponential_pdp(n_h, 1.0 / norm, beta)
}

/// Integer timing offset in samples; positive values mean the receiver started early.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimingOffset(pub i64);

impl TimingOffset {
    pub fn new(d: i64, cfg: &SystemConfig) -> Result<Self> {
        if !cfg.contains_offset(d) {
            return Err(Error::OffsetRange {
                min: d,
                max: d,
                limit: cfg.d_range[0].abs().max(cfg.d_range[1].abs()),
            });
        }
        Ok(Self(d))
    }

    pub fn get(self) -> i64 {
        self.0
    }
}

/// On-disk configuration: every [`SystemConfig`] and [`ChannelProfile`] field by name,
/// plus the waveform selection. Missing keys take the reference values.
///
/// The derived `n_s` and `L` may be given; they are checked, never used as inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub n_x: usize,
    pub n_z: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_s: Option<usize>,
    pub n_h: usize,
    pub m_t: usize,
    pub m_r: usize,
    pub sigma_x2: f64,
    pub sigma_n2: f64,
    #[serde(rename = "N")]
    pub n_blocks: usize,
    #[serde(rename = "L", skip_serializing_if = "Option::is_none")]
    pub l: Option<usize>,
    pub d_range: [i64; 2],
    /// Explicit tap powers. When absent, a unit-power exponential profile with
    /// `pdp_beta` decay is built for `n_h` taps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pdp: Option<Vec<f64>>,
    pub pdp_beta: f64,
    #[serde(rename = "f_D")]
    pub f_d: f64,
    pub f_sa: f64,
    pub correlation_model: CorrelationModel,
    pub signal_mode: SignalMode,
}

impl Default for ConfigFile {
    fn default() -> Self {
        let sys = SystemConfig::reference();
        let ch = ChannelProfile::reference();
        Self {
            n_x: sys.n_x,
            n_z: sys.n_z,
            n_s: None,
            n_h: sys.n_h,
            m_t: sys.m_t,
            m_r: sys.m_r,
            sigma_x2: sys.sigma_x2,
            sigma_n2: sys.sigma_n2,
            n_blocks: sys.n_blocks,
            l: None,
            d_range: sys.d_range,
            pdp: None,
            pdp_beta: REFERENCE_PDP_BETA,
            f_d: ch.f_d,
            f_sa: ch.f_sa,
            correlation_model: ch.correlation_model,
            signal_mode: SignalMode::default(),
        }
    }
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| range("config", e.to_string()))
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| range("config", e.to_string()))
    }

    /// Split into validated system and channel parts.
    pub fn resolve(&self) -> Result<(SystemConfig, ChannelProfile, SignalMode)> {
        let cfg = SystemConfig {
            n_x: self.n_x,
            n_z: self.n_z,
            n_h: self.n_h,
            m_t: self.m_t,
            m_r: self.m_r,
            sigma_x2: self.sigma_x2,
            sigma_n2: self.sigma_n2,
            n_blocks: self.n_blocks,
            d_range: self.d_range,
        }
        .validate()?;
        if let Some(n_s) = self.n_s {
            if n_s != cfg.n_s() {
                return Err(range("n_s", format!("must equal n_x + n_z = {}", cfg.n_s())));
            }
        }
        if let Some(l) = self.l {
            if l != cfg.l() {
                return Err(range("L", format!("must equal N * n_s = {}", cfg.l())));
            }
        }
        let mut profile = match &self.pdp {
            Some(pdp) => ChannelProfile {
                pdp: pdp.clone(),
                ..ChannelProfile::reference()
            },
            None => exponential_pdp_unit_power(cfg.n_h, self.pdp_beta)?,
        };
        profile.f_d = self.f_d;
        profile.f_sa = self.f_sa;
        profile.correlation_model = self.correlation_model;
        profile.validate(&cfg)?;
        self.signal_mode.validate()?;
        Ok((cfg, profile, self.signal_mode))
    }
}
