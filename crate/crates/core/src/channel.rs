//! Doubly-selective Rayleigh MIMO channel, receiver noise and timing offset.

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{ChannelProfile, CorrelationModel, SystemConfig, TimingOffset};
use crate::waveform::{complex_gaussian, Transmitter};

/// Sinusoids per tap in the Jakes synthesis.
pub const JAKES_SINUSOIDS: usize = 32;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Storage {
    /// One tap vector per block of `n_s` samples.
    PerBlock,
    PerSample,
}

/// Channel taps `h_ji[k, l]` for every antenna pair over a span of time indices.
#[derive(Debug, Clone)]
pub struct TapProcess {
    pub profile: ChannelProfile,
    m_r: usize,
    m_t: usize,
    n_h: usize,
    n_s: usize,
    span: usize,
    storage: Storage,
    data: Vec<Complex64>,
}

impl TapProcess {
    /// Deterministic taps held constant over time, `taps[j][i][l]`.
    pub fn fixed(cfg: &SystemConfig, taps: &[Vec<Vec<Complex64>>], span: usize) -> Result<Self> {
        let ok = taps.len() == cfg.m_r
            && taps
                .iter()
                .all(|row| row.len() == cfg.m_t && row.iter().all(|h| h.len() == cfg.n_h));
        if !ok {
            return Err(Error::DimensionMismatch(format!(
                "fixed taps must be {} x {} x {}",
                cfg.m_r, cfg.m_t, cfg.n_h
            )));
        }
        let blocks = span.div_ceil(cfg.n_s());
        let mut data = Vec::with_capacity(cfg.m_r * cfg.m_t * blocks * cfg.n_h);
        for row in taps {
            for h in row {
                for _ in 0..blocks {
                    data.extend_from_slice(h);
                }
            }
        }
        let pdp = (0..cfg.n_h)
            .map(|l| taps.iter().flatten().map(|h| h[l].norm_sqr()).sum::<f64>() / (cfg.m_r * cfg.m_t) as f64)
            .collect();
        Ok(Self {
            profile: ChannelProfile {
                pdp,
                ..ChannelProfile::reference()
            },
            m_r: cfg.m_r,
            m_t: cfg.m_t,
            n_h: cfg.n_h,
            n_s: cfg.n_s(),
            span,
            storage: Storage::PerBlock,
            data,
        })
    }

    pub fn span(&self) -> usize {
        self.span
    }

    /// Tap `l` from transmit antenna `i` to receive antenna `j` at time `k` (all 0-based).
    #[inline]
    pub fn tap(&self, j: usize, i: usize, k: usize, l: usize) -> Complex64 {
        self.taps_at(j, i, k)[l]
    }

    #[inline]
    fn taps_at(&self, j: usize, i: usize, k: usize) -> &[Complex64] {
        let slots = match self.storage {
            Storage::PerBlock => self.span.div_ceil(self.n_s),
            Storage::PerSample => self.span,
        };
        let slot = match self.storage {
            Storage::PerBlock => k / self.n_s,
            Storage::PerSample => k,
        };
        let base = ((j * self.m_t + i) * slots + slot) * self.n_h;
        &self.data[base..base + self.n_h]
    }
}

/// Draw zero-mean circular Gaussian taps with per-delay power `profile.pdp`.
pub fn draw_taps<R: Rng + ?Sized>(
    profile: &ChannelProfile,
    cfg: &SystemConfig,
    rng: &mut R,
    span: usize,
) -> TapProcess {
    let n_h = profile.n_h();
    let pairs = cfg.m_r * cfg.m_t;
    let (storage, data) = match profile.correlation_model {
        CorrelationModel::BlockStatic => {
            let blocks = span.div_ceil(cfg.n_s());
            let mut data = Vec::with_capacity(pairs * blocks * n_h);
            for _ in 0..pairs * blocks {
                data.extend(profile.pdp.iter().map(|&p| complex_gaussian(rng, p)));
            }
            (Storage::PerBlock, data)
        }
        CorrelationModel::Jakes => {
            let mut data = vec![ZERO; pairs * span * n_h];
            let step = 2.0 * PI * profile.f_d / profile.f_sa;
            for pair in 0..pairs {
                for (l, &power) in profile.pdp.iter().enumerate() {
                    let gain = (power / JAKES_SINUSOIDS as f64).sqrt();
                    let mut phasor = [ZERO; JAKES_SINUSOIDS];
                    let mut rotation = [ZERO; JAKES_SINUSOIDS];
                    for n in 0..JAKES_SINUSOIDS {
                        let amplitude = complex_gaussian(rng, 1.0);
                        let arrival: f64 = rng.random_range(0.0..2.0 * PI);
                        let phase: f64 = rng.random_range(0.0..2.0 * PI);
                        phasor[n] = amplitude * Complex64::from_polar(gain, phase);
                        rotation[n] = Complex64::from_polar(1.0, step * arrival.cos());
                    }
                    for k in 0..span {
                        data[(pair * span + k) * n_h + l] = phasor.iter().sum();
                        for (z, r) in phasor.iter_mut().zip(&rotation) {
                            *z *= r;
                        }
                    }
                }
            }
            (Storage::PerSample, data)
        }
    };
    TapProcess {
        profile: profile.clone(),
        m_r: cfg.m_r,
        m_t: cfg.m_t,
        n_h,
        n_s: cfg.n_s(),
        span,
        storage,
        data,
    }
}

/// Block-wise lower-triangular Toeplitz channel: `v_j[k] = Σ_i Σ_u h_ji[k,u] s_i[k-u]`
/// with the convolution confined to each block.
pub fn apply_channel(
    blocks: &[Vec<Complex64>],
    taps: &TapProcess,
    cfg: &SystemConfig,
) -> Result<Vec<Vec<Complex64>>> {
    let n_s = cfg.n_s();
    if blocks.len() != cfg.m_t || taps.m_t != cfg.m_t || taps.m_r != cfg.m_r {
        return Err(Error::DimensionMismatch(format!(
            "{} transmit streams and a {}x{} tap process for a {}x{} link",
            blocks.len(),
            taps.m_r,
            taps.m_t,
            cfg.m_r,
            cfg.m_t
        )));
    }
    if taps.n_h != cfg.n_h {
        return Err(Error::DimensionMismatch(format!(
            "tap process has {} taps, config {}",
            taps.n_h, cfg.n_h
        )));
    }
    let len = blocks.first().map_or(0, Vec::len);
    if blocks.iter().any(|b| b.len() != len) || !len.is_multiple_of(n_s) {
        return Err(Error::DimensionMismatch(format!(
            "transmit streams must share a length that is a multiple of {n_s}"
        )));
    }
    if taps.span < len {
        return Err(Error::DimensionMismatch(format!(
            "tap span {} shorter than {len} samples",
            taps.span
        )));
    }
    let mut out = vec![vec![ZERO; len]; cfg.m_r];
    for (j, v) in out.iter_mut().enumerate() {
        for (i, s) in blocks.iter().enumerate() {
            for start in (0..len).step_by(n_s) {
                // outputs at k >= n_x + n_h - 1 have empty support
                for k in 0..(cfg.n_x + cfg.n_h - 1).min(n_s) {
                    let t = start + k;
                    let h = taps.taps_at(j, i, t);
                    let lo = (k + 1).saturating_sub(cfg.n_x);
                    let hi = k.min(cfg.n_h - 1);
                    let mut acc = ZERO;
                    for u in lo..=hi {
                        acc += h[u] * s[t - u];
                    }
                    v[t] += acc;
                }
            }
        }
    }
    Ok(out)
}

/// Add i.i.d. circular Gaussian noise of power `sigma_n2` to every sample.
pub fn add_noise<R: Rng + ?Sized>(vectors: &mut [Vec<Complex64>], sigma_n2: f64, rng: &mut R) {
    if sigma_n2 == 0.0 {
        return;
    }
    for v in vectors.iter_mut() {
        for x in v.iter_mut() {
            *x += complex_gaussian(rng, sigma_n2);
        }
    }
}

/// Received observation windows, one per receive antenna, all of length `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStream {
    pub antennas: Vec<Vec<Complex64>>,
    pub truth_d: TimingOffset,
    pub seed: u64,
    pub config_hash: String,
}

impl SampleStream {
    pub fn from_antennas(antennas: Vec<Vec<Complex64>>, truth_d: i64) -> Result<Self> {
        let len = antennas.first().map_or(0, Vec::len);
        if antennas.is_empty() || antennas.iter().any(|a| a.len() != len) {
            return Err(Error::DimensionMismatch(
                "receive streams must be non-empty and of equal length".into(),
            ));
        }
        Ok(Self {
            antennas,
            truth_d: TimingOffset(truth_d),
            seed: 0,
            config_hash: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.antennas.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn m_r(&self) -> usize {
        self.antennas.len()
    }

    /// Little-endian dump: magic `ZPSS`, u32 version, u64 L, u64 m_r, u64 seed,
    /// i64 d, then per antenna L interleaved (re, im) f64 pairs.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.m_r() as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.truth_d.0.to_le_bytes())?;
        for antenna in &self.antennas {
            for x in antenna {
                w.write_all(&x.re.to_le_bytes())?;
                w.write_all(&x.im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != DUMP_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let m_r = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let seed = u64::from_le_bytes(read_array(&mut r)?);
        let d = i64::from_le_bytes(read_array(&mut r)?);
        if m_r == 0 {
            return Err(Error::Format("zero receive antennas".into()));
        }
        let mut antennas = Vec::with_capacity(m_r);
        for _ in 0..m_r {
            let mut v = Vec::with_capacity(len);
            for _ in 0..len {
                let re = f64::from_le_bytes(read_array(&mut r)?);
                let im = f64::from_le_bytes(read_array(&mut r)?);
                v.push(Complex64::new(re, im));
            }
            antennas.push(v);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            antennas,
            truth_d: TimingOffset(d),
            seed,
            config_hash: String::new(),
        })
    }
}

const DUMP_MAGIC: &[u8; 4] = b"ZPSS";
const DUMP_VERSION: u32 = 1;

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated dump: {e}")))?;
    Ok(buf)
}

/// Short stable digest of the configuration that produced a stream.
pub fn config_hash(cfg: &SystemConfig, profile: &ChannelProfile) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(cfg).expect("config serializes"));
    hasher.update(serde_json::to_vec(profile).expect("profile serializes"));
    hasher.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Channel output samples needed to fill an `L`-sample window at offset `d`.
pub fn required_output_len(cfg: &SystemConfig, d: i64) -> usize {
    if d > 0 {
        cfg.l().saturating_sub(d as usize)
    } else {
        cfg.l() + d.unsigned_abs() as usize
    }
}

/// Shift the noiseless channel output by `d` and add receiver noise over the
/// whole `L`-sample window. For `d > 0` the window opens with `d` noise-only
/// samples; for `d <= 0` the first `|d|` channel samples are missed.
pub fn inject_offset<R: Rng + ?Sized>(
    noiseless: &[Vec<Complex64>],
    d: i64,
    sigma_n2: f64,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<SampleStream> {
    if !cfg.contains_offset(d) {
        return Err(Error::OffsetRange {
            min: d,
            max: d,
            limit: cfg.n_s() as i64 - 1,
        });
    }
    if noiseless.len() != cfg.m_r {
        return Err(Error::DimensionMismatch(format!(
            "{} receive streams for m_r = {}",
            noiseless.len(),
            cfg.m_r
        )));
    }
    let l = cfg.l();
    let needed = required_output_len(cfg, d);
    if noiseless.iter().any(|v| v.len() < needed) {
        return Err(Error::DimensionMismatch(format!(
            "offset {d} needs {needed} channel samples per antenna"
        )));
    }
    let mut antennas: Vec<Vec<Complex64>> = noiseless
        .iter()
        .map(|v| {
            if d > 0 {
                let prefix = d as usize;
                let mut w = vec![ZERO; prefix];
                w.extend_from_slice(&v[..l - prefix]);
                w
            } else {
                let skip = d.unsigned_abs() as usize;
                v[skip..skip + l].to_vec()
            }
        })
        .collect();
    add_noise(&mut antennas, sigma_n2, rng);
    Ok(SampleStream {
        antennas,
        truth_d: TimingOffset(d),
        seed: 0,
        config_hash: String::new(),
    })
}

/// Full chain: transmit blocks, channel, offset and noise.
pub fn simulate_stream<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    profile: &ChannelProfile,
    tx: &Transmitter,
    d: i64,
    rng: &mut R,
) -> Result<SampleStream> {
    let blocks = required_output_len(cfg, d).div_ceil(cfg.n_s()).max(1);
    let sent = tx.burst(rng, cfg.m_t, blocks);
    let taps = draw_taps(profile, cfg, rng, blocks * cfg.n_s());
    let received = apply_channel(&sent, &taps, cfg)?;
    let mut stream = inject_offset(&received, d, cfg.sigma_n2, cfg, rng)?;
    stream.config_hash = config_hash(cfg, profile);
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveform::SignalMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn unit_tap_cfg() -> SystemConfig {
        SystemConfig {
            n_h: 1,
            ..SystemConfig::reference()
        }
    }

    #[test]
    fn identity_channel_passes_input() {
        let cfg = unit_tap_cfg();
        let tx = Transmitter::new(&cfg, SignalMode::Gaussian).unwrap();
        let sent = tx.burst(&mut rng(1), 1, 3);
        let taps = TapProcess::fixed(&cfg, &[vec![vec![Complex64::new(1.0, 0.0)]]], 3 * 140).unwrap();
        assert_eq!(apply_channel(&sent, &taps, &cfg).unwrap(), sent);
    }

    #[test]
    fn output_tail_is_exactly_zero_and_blocks_do_not_leak() {
        let cfg = SystemConfig::reference();
        let profile = ChannelProfile::reference();
        let tx = Transmitter::new(&cfg, SignalMode::Qam(128)).unwrap();
        let mut r = rng(2);
        let sent = tx.burst(&mut r, 1, 4);
        let taps = draw_taps(&profile, &cfg, &mut r, 4 * 140);
        let v = apply_channel(&sent, &taps, &cfg).unwrap();
        for b in 0..4 {
            for k in 137..140 {
                assert_eq!(v[0][b * 140 + k], ZERO);
            }
            assert_ne!(v[0][b * 140 + 136], ZERO);
        }
        // silencing block 1 leaves block 2 untouched
        let mut quiet = sent.clone();
        quiet[0][140..280].fill(ZERO);
        let w = apply_channel(&quiet, &taps, &cfg).unwrap();
        assert_eq!(&w[0][280..], &v[0][280..]);
        assert!(w[0][140..280].iter().all(|x| *x == ZERO));
    }

    #[test]
    fn apply_channel_checks_dimensions() {
        let cfg = SystemConfig::reference();
        let profile = ChannelProfile::reference();
        let taps = draw_taps(&profile, &cfg, &mut rng(3), 280);
        let bad_len = vec![vec![ZERO; 150]];
        assert!(matches!(
            apply_channel(&bad_len, &taps, &cfg),
            Err(Error::DimensionMismatch(_))
        ));
        let too_long = vec![vec![ZERO; 420]];
        assert!(apply_channel(&too_long, &taps, &cfg).is_err());
        let two = vec![vec![ZERO; 280]; 2];
        assert!(apply_channel(&two, &taps, &cfg).is_err());
    }

    #[test]
    fn zero_doppler_jakes_is_constant() {
        let cfg = SystemConfig::reference();
        let profile = ChannelProfile {
            f_d: 0.0,
            ..ChannelProfile::reference()
        };
        let taps = draw_taps(&profile, &cfg, &mut rng(4), 500);
        for l in 0..cfg.n_h {
            let h0 = taps.tap(0, 0, 0, l);
            for k in 1..500 {
                assert!((taps.tap(0, 0, k, l) - h0).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_noise_leaves_vectors_unchanged() {
        let mut v = vec![vec![Complex64::new(1.0, -2.0); 10]];
        let before = v.clone();
        add_noise(&mut v, 0.0, &mut rng(5));
        assert_eq!(v, before);
    }

    #[test]
    fn offset_semantics() {
        let cfg = SystemConfig {
            n_blocks: 2,
            ..SystemConfig::reference()
        };
        let output: Vec<Complex64> = (0..400).map(|k| Complex64::new(k as f64 + 1.0, 0.0)).collect();
        let out = vec![output];
        let s0 = inject_offset(&out, 0, 0.0, &cfg, &mut rng(6)).unwrap();
        assert_eq!(s0.antennas[0], out[0][..280].to_vec());
        let s3 = inject_offset(&out, 3, 0.0, &cfg, &mut rng(6)).unwrap();
        assert_eq!(s3.len(), 280);
        assert!(s3.antennas[0][..3].iter().all(|x| *x == ZERO));
        assert_eq!(s3.antennas[0][3], out[0][0]);
        let sm2 = inject_offset(&out, -2, 0.0, &cfg, &mut rng(6)).unwrap();
        assert_eq!(sm2.antennas[0][0], out[0][2]);
        assert_eq!(sm2.len(), 280);
        assert!(matches!(
            inject_offset(&out, 31, 0.0, &cfg, &mut rng(6)),
            Err(Error::OffsetRange { .. })
        ));
    }

    #[test]
    fn simulated_stream_has_length_l_for_all_offsets() {
        let cfg = SystemConfig {
            m_r: 2,
            m_t: 2,
            n_blocks: 3,
            ..SystemConfig::reference()
        };
        let profile = ChannelProfile::reference();
        let tx = Transmitter::new(&cfg, SignalMode::Qam(128)).unwrap();
        for d in [-30, -1, 0, 1, 30] {
            let s = simulate_stream(&cfg, &profile, &tx, d, &mut rng(7)).unwrap();
            assert_eq!(s.m_r(), 2);
            assert!(s.antennas.iter().all(|a| a.len() == cfg.l()));
            assert_eq!(s.truth_d, TimingOffset(d));
            assert_eq!(s.config_hash.len(), 16);
        }
    }

    #[test]
    fn dump_rejects_garbage() {
        assert!(SampleStream::read_from(&b"NOPE"[..]).is_err());
        let s = SampleStream::from_antennas(vec![vec![Complex64::new(1.0, 2.0); 3]], -4).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 32 + 3 * 16);
        assert!(SampleStream::read_from(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(SampleStream::read_from(&extra[..]).is_err());
    }
}
