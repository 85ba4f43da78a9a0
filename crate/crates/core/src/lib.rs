//! Blind timing-offset estimation for zero-padded OFDM.
//!
//! The receiver compares per-sample received power, folded modulo the block
//! length, against its theoretical profile. The weighted variant scales each
//! residual by the variance of the sample moment; a transition-metric energy
//! detector is provided as a baseline.

pub mod channel;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod moments;
pub mod params;
pub mod waveform;

pub use channel::{simulate_stream, SampleStream};
pub use error::{Error, Result};
pub use estimators::{estimate_som, estimate_tm, estimate_wsom, run_estimator, Estimate, EstimatorId};
pub use moments::{sample_som, MomentTable, VarianceMode};
pub use params::{ChannelProfile, ConfigFile, CorrelationModel, SystemConfig, TimingOffset};
pub use waveform::{SignalMode, Transmitter};
