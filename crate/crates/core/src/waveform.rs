//! Transmit-side ZP-OFDM block generation.
//!
//! Two sources are provided: literal QAM symbols pushed through an inverse DFT,
//! and the i.i.d. circular Gaussian surrogate for the resulting time samples.
//! Both emit `n_x` data samples with per-antenna power `sigma_x2 / m_t`
//! followed by `n_z` exact zeros.

use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::SystemConfig;

/// Draw a circular complex Gaussian sample of the given variance.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let scale = (0.5 * variance).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * scale, im * scale)
}

/// Source of the transmitted data samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalMode {
    /// Square or cross QAM of the given order.
    Qam(u32),
    Gaussian,
}

impl Default for SignalMode {
    fn default() -> Self {
        SignalMode::Qam(128)
    }
}

impl SignalMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            SignalMode::Qam(order) => ConstellationSpec::qam(*order).map(|_| ()),
            SignalMode::Gaussian => Ok(()),
        }
    }

    /// Bits carried per data sample; the Gaussian surrogate counts as 128-QAM.
    pub fn bits_per_symbol(&self) -> f64 {
        match self {
            SignalMode::Qam(order) => (*order as f64).log2(),
            SignalMode::Gaussian => 7.0,
        }
    }
}

/// Unit-energy QAM point set.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstellationSpec {
    pub order: u32,
    /// Factor applied to the odd-integer grid to reach unit average energy.
    pub unit_power_scaling: f64,
    points: Vec<Complex64>,
}

impl ConstellationSpec {
    /// Square QAM for even powers of two (4 … 1024), cross QAM for 32, 128 and 512.
    pub fn qam(order: u32) -> Result<Self> {
        let (side, grid) = match order {
            4 | 16 | 64 | 256 | 1024 => {
                let side = (order as f64).sqrt() as i32;
                (side, square_grid(side))
            }
            32 | 128 | 512 => {
                let m = (order.trailing_zeros() as i32 - 1) / 2;
                let side = 3 << (m - 1);
                let corner = 1 << (m - 2);
                let edge = |v: i32| v < corner || v >= side - corner;
                let grid = square_grid(side)
                    .into_iter()
                    .filter(|&(i, q)| !(edge(i) && edge(q)))
                    .collect();
                (side, grid)
            }
            other => return Err(Error::UnsupportedOrder(other)),
        };
        let points: Vec<Complex64> = grid
            .iter()
            .map(|&(i, q)| Complex64::new((2 * i - side + 1) as f64, (2 * q - side + 1) as f64))
            .collect();
        debug_assert_eq!(points.len(), order as usize);
        let energy = points.iter().map(|p| p.norm_sqr()).sum::<f64>() / points.len() as f64;
        let scale = energy.sqrt().recip();
        Ok(Self {
            order,
            unit_power_scaling: scale,
            points: points.into_iter().map(|p| p * scale).collect(),
        })
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn random_symbol<R: Rng + ?Sized>(&self, rng: &mut R) -> Complex64 {
        self.points[rng.random_range(0..self.points.len())]
    }
}

fn square_grid(side: i32) -> Vec<(i32, i32)> {
    (0..side).flat_map(|i| (0..side).map(move |q| (i, q))).collect()
}

/// One transmitted block on one antenna.
#[derive(Debug, Clone, PartialEq)]
pub struct OfdmBlock {
    pub samples: Vec<Complex64>,
    /// 1-based transmit antenna.
    pub antenna_index: usize,
    pub block_index: usize,
}

/// Reusable block source; holds the inverse-DFT plan in QAM mode.
#[derive(Clone)]
pub struct Transmitter {
    n_x: usize,
    n_s: usize,
    per_antenna_power: f64,
    source: Source,
}

#[derive(Clone)]
enum Source {
    Qam {
        constellation: ConstellationSpec,
        ifft: Arc<dyn Fft<f64>>,
    },
    Gaussian,
}

impl std::fmt::Debug for Transmitter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Transmitter")
            .field("n_x", &self.n_x)
            .field("n_s", &self.n_s)
            .field("per_antenna_power", &self.per_antenna_power)
            .finish_non_exhaustive()
    }
}

impl Transmitter {
    pub fn new(cfg: &SystemConfig, mode: SignalMode) -> Result<Self> {
        let source = match mode {
            SignalMode::Qam(order) => Source::Qam {
                constellation: ConstellationSpec::qam(order)?,
                ifft: FftPlanner::new().plan_fft_inverse(cfg.n_x),
            },
            SignalMode::Gaussian => Source::Gaussian,
        };
        Ok(Self {
            n_x: cfg.n_x,
            n_s: cfg.n_s(),
            per_antenna_power: cfg.sigma_x2 / cfg.m_t as f64,
            source,
        })
    }

    pub fn block<R: Rng + ?Sized>(&self, rng: &mut R, antenna: usize, block: usize) -> OfdmBlock {
        let mut samples = vec![Complex64::new(0.0, 0.0); self.n_s];
        let data = &mut samples[..self.n_x];
        match &self.source {
            Source::Qam {
                constellation,
                ifft,
            } => {
                for x in data.iter_mut() {
                    *x = constellation.random_symbol(rng);
                }
                ifft.process(data);
                // unnormalized inverse DFT of unit-energy symbols has power n_x
                let gain = (self.per_antenna_power / self.n_x as f64).sqrt();
                for x in data.iter_mut() {
                    *x *= gain;
                }
            }
            Source::Gaussian => {
                for x in data.iter_mut() {
                    *x = complex_gaussian(rng, self.per_antenna_power);
                }
            }
        }
        OfdmBlock {
            samples,
            antenna_index: antenna,
            block_index: block,
        }
    }

    /// `n_blocks` consecutive blocks for every transmit antenna, concatenated per antenna.
    pub fn burst<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        m_t: usize,
        n_blocks: usize,
    ) -> Vec<Vec<Complex64>> {
        let mut out = vec![Vec::with_capacity(n_blocks * self.n_s); m_t];
        for n in 0..n_blocks {
            for (i, stream) in out.iter_mut().enumerate() {
                stream.extend(self.block(rng, i + 1, n).samples);
            }
        }
        out
    }
}

pub fn generate_block_qam<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    constellation: &ConstellationSpec,
    rng: &mut R,
    antenna: usize,
    block: usize,
) -> Result<OfdmBlock> {
    Transmitter::new(cfg, SignalMode::Qam(constellation.order)).map(|tx| tx.block(rng, antenna, block))
}

pub fn generate_block_gaussian<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    rng: &mut R,
    antenna: usize,
    block: usize,
) -> OfdmBlock {
    Transmitter::new(cfg, SignalMode::Gaussian)
        .expect("gaussian source is always available")
        .block(rng, antenna, block)
}
