//! OFDM / 16-QAM baseband modem.
//!
//! Bits are carried as `u8` values that are either 0 or 1. Symbols use a
//! Gray-coded square 16-QAM constellation scaled to unit average energy, and
//! OFDM blocks use a unitary DFT so energy is preserved between the symbol and
//! sample domains.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Result};

/// Complex baseband sample or symbol.
pub type Cx = Complex64;

/// 1/sqrt(10): scales {±1, ±3} per axis to unit average symbol energy.
pub const QAM16_SCALE: f64 = 0.316_227_766_016_837_94;

/// Per-axis Gray map, indexed by the two-bit label `b0 b1`.
const AXIS_LEVELS: [(u8, f64); 4] = [(0b00, -3.0), (0b01, -1.0), (0b10, 3.0), (0b11, 1.0)];

fn axis_level(label: u8) -> f64 {
    AXIS_LEVELS
        .iter()
        .find(|(l, _)| *l == label)
        .map(|(_, v)| *v * QAM16_SCALE)
        .expect("two-bit label")
}

/// Nearest level on one axis. Labels are scanned in ascending order with a
/// strict comparison, so equidistant levels resolve to the smaller label.
fn axis_decide(x: f64) -> u8 {
    let mut best = (u8::MAX, f64::INFINITY);
    for label in 0..4u8 {
        let d = (x - axis_level(label)).powi(2);
        if d < best.1 {
            best = (label, d);
        }
    }
    best.0
}

/// Maps bits onto 16-QAM points, four bits per symbol. The first two bits of
/// each group select the in-phase level and the last two the quadrature level.
pub fn qam16_modulate(bits: &[u8]) -> Result<Vec<Cx>> {
    if !bits.len().is_multiple_of(4) {
        return invalid(format!("16-QAM needs a multiple of 4 bits, got {}", bits.len()));
    }
    if let Some(b) = bits.iter().find(|&&b| b > 1) {
        return invalid(format!("bit values must be 0 or 1, found {b}"));
    }
    Ok(bits
        .chunks_exact(4)
        .map(|c| {
            let i = (c[0] << 1) | c[1];
            let q = (c[2] << 1) | c[3];
            Cx::new(axis_level(i), axis_level(q))
        })
        .collect())
}

/// Hard-decision minimum-distance demapper. Ties go to the constellation
/// point with the lexicographically smallest bit label; because the decision
/// separates per axis this is the smallest label on each axis.
pub fn qam16_demodulate(symbols: &[Cx]) -> Vec<u8> {
    let mut bits = Vec::with_capacity(symbols.len() * 4);
    for s in symbols {
        let i = axis_decide(s.re);
        let q = axis_decide(s.im);
        bits.extend_from_slice(&[i >> 1, i & 1, q >> 1, q & 1]);
    }
    bits
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfdmConfig {
    pub n_subcarriers: usize,
    pub cp_len: usize,
    /// Complex samples per second; only used to convert wall-clock
    /// durations into frame counts.
    pub sample_rate_hz: f64,
}

impl Default for OfdmConfig {
    fn default() -> Self {
        Self {
            n_subcarriers: 64,
            cp_len: 16,
            sample_rate_hz: 3400.0,
        }
    }
}

impl OfdmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subcarriers == 0 || !self.n_subcarriers.is_power_of_two() {
            return invalid(format!(
                "n_subcarriers must be a power of two, got {}",
                self.n_subcarriers
            ));
        }
        if self.cp_len >= self.n_subcarriers {
            return invalid(format!(
                "cp_len {} must be shorter than n_subcarriers {}",
                self.cp_len, self.n_subcarriers
            ));
        }
        if !(self.sample_rate_hz > 0.0) {
            return invalid("sample_rate_hz must be positive");
        }
        Ok(())
    }

    /// Samples per OFDM block including the cyclic prefix.
    pub fn block_len(&self) -> usize {
        self.n_subcarriers + self.cp_len
    }

    /// Number of OFDM blocks needed to carry `n_symbols`.
    pub fn blocks_for(&self, n_symbols: usize) -> usize {
        n_symbols.div_ceil(self.n_subcarriers)
    }

    pub fn block_duration_s(&self) -> f64 {
        self.block_len() as f64 / self.sample_rate_hz
    }
}

/// A run of time-domain samples.
///
/// Serializes as a base64 blob of little-endian `f64` pairs `(re, im)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleFrame {
    pub samples: Vec<Cx>,
}

impl SampleFrame {
    pub fn new(samples: Vec<Cx>) -> Self {
        Self { samples }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            samples: vec![Cx::new(0.0, 0.0); len],
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum()
    }

    fn to_base64(&self) -> String {
        let mut bytes = Vec::with_capacity(self.samples.len() * 16);
        for s in &self.samples {
            bytes.extend_from_slice(&s.re.to_le_bytes());
            bytes.extend_from_slice(&s.im.to_le_bytes());
        }
        BASE64.encode(bytes)
    }

    fn from_base64(text: &str) -> std::result::Result<Self, String> {
        let bytes = BASE64.decode(text).map_err(|e| e.to_string())?;
        if bytes.len() % 16 != 0 {
            return Err(format!("sample blob length {} is not a multiple of 16", bytes.len()));
        }
        let samples = bytes
            .chunks_exact(16)
            .map(|c| {
                let re = f64::from_le_bytes(c[..8].try_into().unwrap());
                let im = f64::from_le_bytes(c[8..].try_into().unwrap());
                Cx::new(re, im)
            })
            .collect();
        Ok(Self { samples })
    }
}

impl Serialize for SampleFrame {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_base64())
    }
}

impl<'de> Deserialize<'de> for SampleFrame {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Self::from_base64(&text).map_err(serde::de::Error::custom)
    }
}

/// Inverse unitary DFT per block of `n_subcarriers` symbols, each block
/// prefixed with its last `cp_len` samples.
pub fn ofdm_modulate(symbols: &[Cx], cfg: &OfdmConfig) -> Result<SampleFrame> {
    cfg.validate()?;
    let n = cfg.n_subcarriers;
    if !symbols.len().is_multiple_of(n) {
        return invalid(format!(
            "symbol count {} is not a multiple of {n} subcarriers",
            symbols.len()
        ));
    }
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let scale = 1.0 / (n as f64).sqrt();
    let mut out = Vec::with_capacity(symbols.len() / n * cfg.block_len());
    let mut block = vec![Cx::new(0.0, 0.0); n];
    for chunk in symbols.chunks_exact(n) {
        block.copy_from_slice(chunk);
        ifft.process(&mut block);
        block.iter_mut().for_each(|s| *s *= scale);
        out.extend_from_slice(&block[n - cfg.cp_len..]);
        out.extend_from_slice(&block);
    }
    Ok(SampleFrame::new(out))
}

/// Drops each block's cyclic prefix and applies the forward unitary DFT.
pub fn ofdm_demodulate(frame: &SampleFrame, cfg: &OfdmConfig) -> Result<Vec<Cx>> {
    cfg.validate()?;
    let n = cfg.n_subcarriers;
    let block_len = cfg.block_len();
    if !frame.len().is_multiple_of(block_len) {
        return invalid(format!(
            "frame length {} is not a multiple of the {block_len}-sample block",
            frame.len()
        ));
    }
    let fft = FftPlanner::new().plan_fft_forward(n);
    let scale = 1.0 / (n as f64).sqrt();
    let mut out = Vec::with_capacity(frame.len() / block_len * n);
    for chunk in frame.samples.chunks_exact(block_len) {
        let mut block = chunk[cfg.cp_len..].to_vec();
        fft.process(&mut block);
        out.extend(block.into_iter().map(|s| s * scale));
    }
    Ok(out)
}

/// Bits → zero-padded 16-QAM symbols → OFDM samples.
pub fn modulate_bits(bits: &[u8], cfg: &OfdmConfig) -> Result<SampleFrame> {
    let mut symbols = qam16_modulate(bits)?;
    let padded = cfg.blocks_for(symbols.len()).max(1) * cfg.n_subcarriers;
    symbols.resize(padded, Cx::new(0.0, 0.0));
    ofdm_modulate(&symbols, cfg)
}

/// Inverse of [`modulate_bits`]: keeps the first `n_bits` demodulated bits.
pub fn demodulate_bits(frame: &SampleFrame, n_bits: usize, cfg: &OfdmConfig) -> Result<Vec<u8>> {
    if !n_bits.is_multiple_of(4) {
        return invalid(format!("bit count {n_bits} is not a multiple of 4"));
    }
    let symbols = ofdm_demodulate(frame, cfg)?;
    if symbols.len() * 4 < n_bits {
        return invalid(format!(
            "frame carries {} symbols, need {} for {n_bits} bits",
            symbols.len(),
            n_bits / 4
        ));
    }
    Ok(qam16_demodulate(&symbols[..n_bits / 4]))
}

/// Fraction of positions where `a` and `b` differ. Lengths must match.
pub fn bit_error_rate(a: &[u8], b: &[u8]) -> f64 {
    assert_eq!(a.len(), b.len(), "bit vectors differ in length");
    if a.is_empty() {
        return 0.0;
    }
    let errors = a.iter().zip(b).filter(|(x, y)| x != y).count();
    errors as f64 / a.len() as f64
}
