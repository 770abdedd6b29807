//! Passive multi-antenna eavesdropper.
//!
//! Eve sees only what reaches her antennas plus public protocol structure.
//! [`EveView`] is the projection of a [`Transcript`] onto that knowledge; every
//! strategy is a function of the view alone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::phy::{bit_error_rate, demodulate_bits, Cx, OfdmConfig, SampleFrame};
use crate::protocol::{bob_measure_csi, generate_key, Transcript};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EveStrategy {
    /// Cross-antenna divergence classification of jammed samples.
    #[default]
    Divergence,
    /// Uniform key bits; calibration baseline.
    RandomGuess,
    /// Copy A of antenna 0, equalized by the training estimate.
    SingleAntennaNearest,
    /// Divergence attack with the true per-frame effective channels.
    OracleEqualized,
}

impl EveStrategy {
    pub fn name(self) -> &'static str {
        match self {
            EveStrategy::Divergence => "divergence",
            EveStrategy::RandomGuess => "random-guess",
            EveStrategy::SingleAntennaNearest => "single-antenna-nearest",
            EveStrategy::OracleEqualized => "oracle-equalized",
        }
    }
}

impl std::fmt::Display for EveStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EveStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        [
            EveStrategy::Divergence,
            EveStrategy::RandomGuess,
            EveStrategy::SingleAntennaNearest,
            EveStrategy::OracleEqualized,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| {
            format!(
                "unknown strategy {s:?}; expected divergence, random-guess, single-antenna-nearest or oracle-equalized"
            )
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EveConfig {
    pub n_antennas: usize,
    pub strategy: EveStrategy,
}

impl Default for EveConfig {
    fn default() -> Self {
        Self {
            n_antennas: 2,
            strategy: EveStrategy::Divergence,
        }
    }
}

impl EveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_antennas == 0 {
            return invalid("Eve needs at least one antenna");
        }
        if self.strategy == EveStrategy::Divergence && self.n_antennas < 2 {
            return invalid("the divergence strategy needs at least two antennas");
        }
        Ok(())
    }

    /// Replaces the divergence strategy by its single-antenna counterpart
    /// when only one antenna is available.
    pub fn resolved(n_antennas: usize, strategy: EveStrategy) -> Self {
        let strategy = if strategy == EveStrategy::Divergence && n_antennas < 2 {
            EveStrategy::SingleAntennaNearest
        } else {
            strategy
        };
        Self { n_antennas, strategy }
    }
}

/// One payload frame as Eve hears it: `rx[antenna][copy]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EveFrame {
    pub rx: Vec<Vec<SampleFrame>>,
}

/// Everything Eve can observe. Holds no jam schedule, precoder, key or
/// channel profile; `oracle_channels` is filled only for the oracle
/// diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EveView {
    pub key_bits: usize,
    pub ofdm: OfdmConfig,
    pub pilot: SampleFrame,
    /// Pilot receptions per training slot, `training_rx[slot][antenna]`.
    pub training_rx: Vec<Vec<SampleFrame>>,
    pub frames: Vec<EveFrame>,
    /// True effective channel `oracle_channels[frame][antenna]`.
    pub oracle_channels: Option<Vec<Vec<Cx>>>,
}

impl EveView {
    pub fn from_transcript(t: &Transcript) -> Self {
        Self {
            key_bits: t.config.key_bits,
            ofdm: t.config.ofdm,
            pilot: t.pilot.clone(),
            training_rx: t.training.iter().map(|r| r.eve_rx.clone()).collect(),
            frames: t.frames.iter().map(|f| EveFrame { rx: f.eve_rx.clone() }).collect(),
            oracle_channels: None,
        }
    }

    /// View augmented with the true per-frame effective channels.
    pub fn with_oracle(t: &Transcript) -> Result<Self> {
        let per_antenna = (0..t.n_eve_antennas())
            .map(|a| t.eve_effective_channels(a))
            .collect::<Result<Vec<_>>>()?;
        let oracle = (0..t.frames.len())
            .map(|f| per_antenna.iter().map(|ch| ch[f]).collect())
            .collect();
        Ok(Self {
            oracle_channels: Some(oracle),
            ..Self::from_transcript(t)
        })
    }

    pub fn n_antennas(&self) -> usize {
        self.training_rx.first().map_or(0, Vec::len)
    }

    /// Eve's reception restricted to her first `n` antennas.
    pub fn restrict_antennas(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n_antennas() {
            return invalid(format!("cannot keep {n} of {} antennas", self.n_antennas()));
        }
        Ok(Self {
            key_bits: self.key_bits,
            ofdm: self.ofdm,
            pilot: self.pilot.clone(),
            training_rx: self.training_rx.iter().map(|r| r[..n].to_vec()).collect(),
            frames: self
                .frames
                .iter()
                .map(|f| EveFrame { rx: f.rx[..n].to_vec() })
                .collect(),
            oracle_channels: self
                .oracle_channels
                .as_ref()
                .map(|o| o.iter().map(|c| c[..n].to_vec()).collect()),
        })
    }
}

/// Least-squares channel per antenna from the last training pilot.
pub fn eve_estimate_channels(view: &EveView) -> Result<Vec<Cx>> {
    let Some(last) = view.training_rx.last() else {
        return invalid("Eve has no training observations");
    };
    last.iter().map(|rx| bob_measure_csi(rx, &view.pilot)).collect()
}

/// Population variance of the values across antennas.
pub fn divergence(z: &[Cx]) -> Result<f64> {
    if z.len() < 2 {
        return invalid(format!("divergence needs at least two antennas, got {}", z.len()));
    }
    let n = z.len() as f64;
    let mean = z.iter().sum::<Cx>() / n;
    Ok(z.iter().map(|v| (v - mean).norm_sqr()).sum::<f64>() / n)
}

/// Eve's splice of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SplicedFrame {
    pub frame: SampleFrame,
    /// Copy judged clean at each sample index.
    pub selected: Vec<usize>,
}

/// Per sample, keeps the copy whose equalized antenna values agree best
/// (ties go to the lower copy index) and combines antennas with
/// maximal-ratio weights.
pub fn classify_and_splice_frame(frame: &EveFrame, channels: &[Cx]) -> Result<SplicedFrame> {
    let n_ant = frame.rx.len();
    if n_ant < 2 || channels.len() != n_ant {
        return invalid(format!(
            "splicing needs at least two antennas and one channel each, got {n_ant} and {}",
            channels.len()
        ));
    }
    if channels.iter().any(|h| h.norm_sqr() == 0.0) {
        return invalid("cannot equalize a zero channel estimate");
    }
    let n_copies = frame.rx[0].len();
    let len = frame.rx[0].first().map_or(0, SampleFrame::len);
    if n_copies == 0
        || frame
            .rx
            .iter()
            .any(|a| a.len() != n_copies || a.iter().any(|c| c.len() != len))
    {
        return invalid("antenna receptions disagree in shape");
    }
    let gain: f64 = channels.iter().map(|h| h.norm_sqr()).sum();
    let inv: Vec<Cx> = channels.iter().map(|h| h.inv()).collect();

    let mut selected = Vec::with_capacity(len);
    let mut out = Vec::with_capacity(len);
    let mut z = vec![Cx::default(); n_ant];
    for i in 0..len {
        let mut best = (f64::INFINITY, 0);
        for c in 0..n_copies {
            for a in 0..n_ant {
                z[a] = frame.rx[a][c].samples[i] * inv[a];
            }
            let d = divergence(&z)?;
            if d < best.0 {
                best = (d, c);
            }
        }
        let c = best.1;
        selected.push(c);
        let combined: Cx = (0..n_ant).map(|a| channels[a].conj() * frame.rx[a][c].samples[i]).sum();
        out.push(combined / gain);
    }
    Ok(SplicedFrame {
        frame: SampleFrame::new(out),
        selected,
    })
}

/// Applies [`classify_and_splice_frame`] to every payload frame using the
/// training estimates.
pub fn eve_classify_and_splice(view: &EveView, channels: &[Cx]) -> Result<Vec<SplicedFrame>> {
    view.frames
        .iter()
        .map(|f| classify_and_splice_frame(f, channels))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub strategy: EveStrategy,
    pub key_guess: Vec<u8>,
    /// Per frame, the copy Eve kept at each sample; empty when the strategy
    /// does not classify.
    pub selections: Vec<Vec<usize>>,
}

fn demodulate_all(view: &EveView, frames: &[SampleFrame]) -> Result<Vec<u8>> {
    let mut bits = Vec::with_capacity(frames.len() * view.key_bits);
    for f in frames {
        bits.extend(demodulate_bits(f, view.key_bits, &view.ofdm)?);
    }
    Ok(bits)
}

pub fn eve_attack<R: Rng + ?Sized>(view: &EveView, cfg: &EveConfig, rng: &mut R) -> Result<AttackOutcome> {
    cfg.validate()?;
    if view.n_antennas() < cfg.n_antennas {
        return invalid(format!(
            "view has {} antennas, attack asks for {}",
            view.n_antennas(),
            cfg.n_antennas
        ));
    }
    if view.frames.is_empty() {
        return invalid("view has no payload frames");
    }
    let view = &view.restrict_antennas(cfg.n_antennas)?;
    let (key_guess, selections) = match cfg.strategy {
        EveStrategy::RandomGuess => (generate_key(rng, view.key_bits * view.frames.len()), Vec::new()),
        EveStrategy::SingleAntennaNearest => {
            let h = eve_estimate_channels(view)?[0];
            if h.norm_sqr() == 0.0 {
                return invalid("cannot equalize a zero channel estimate");
            }
            let frames: Vec<SampleFrame> = view
                .frames
                .iter()
                .map(|f| SampleFrame::new(f.rx[0][0].samples.iter().map(|s| s / h).collect()))
                .collect();
            let selections = frames.iter().map(|f| vec![0; f.len()]).collect();
            (demodulate_all(view, &frames)?, selections)
        }
        EveStrategy::Divergence => {
            let channels = eve_estimate_channels(view)?;
            let spliced = eve_classify_and_splice(view, &channels)?;
            let frames: Vec<SampleFrame> = spliced.iter().map(|s| s.frame.clone()).collect();
            (
                demodulate_all(view, &frames)?,
                spliced.into_iter().map(|s| s.selected).collect(),
            )
        }
        EveStrategy::OracleEqualized => {
            let Some(oracle) = &view.oracle_channels else {
                return invalid("the oracle strategy needs a view built with oracle channels");
            };
            let spliced = if cfg.n_antennas >= 2 {
                view.frames
                    .iter()
                    .zip(oracle)
                    .map(|(f, h)| classify_and_splice_frame(f, h))
                    .collect::<Result<Vec<_>>>()?
            } else {
                view.frames
                    .iter()
                    .zip(oracle)
                    .map(|(f, h)| SplicedFrame {
                        frame: SampleFrame::new(f.rx[0][0].samples.iter().map(|s| s / h[0]).collect()),
                        selected: vec![0; f.rx[0][0].len()],
                    })
                    .collect()
            };
            let frames: Vec<SampleFrame> = spliced.iter().map(|s| s.frame.clone()).collect();
            (
                demodulate_all(view, &frames)?,
                spliced.into_iter().map(|s| s.selected).collect(),
            )
        }
    };
    Ok(AttackOutcome {
        strategy: cfg.strategy,
        key_guess,
        selections,
    })
}

/// Scored attack, serialized as the attack report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub strategy: EveStrategy,
    /// Fraction of samples per frame where Eve kept an unjammed copy.
    pub per_frame_accuracy: Vec<f64>,
    pub key_ber: f64,
}

impl AttackReport {
    /// Mean accuracy over frames, `None` when the strategy does not classify.
    pub fn mean_accuracy(&self) -> Option<f64> {
        if self.per_frame_accuracy.is_empty() {
            None
        } else {
            Some(self.per_frame_accuracy.iter().sum::<f64>() / self.per_frame_accuracy.len() as f64)
        }
    }
}

/// Scores an outcome against the transcript's ground truth.
pub fn evaluate_attack(t: &Transcript, outcome: &AttackOutcome) -> Result<AttackReport> {
    if !outcome.selections.is_empty() && outcome.selections.len() != t.frames.len() {
        return invalid("selections do not match the frame count");
    }
    let per_frame_accuracy = outcome
        .selections
        .iter()
        .zip(&t.frames)
        .map(|(sel, f)| {
            if sel.len() != f.jam.frame_len() {
                return invalid("selection length does not match the frame");
            }
            let clean = sel.iter().enumerate().filter(|&(i, &c)| !f.jam.is_jammed(c, i)).count();
            Ok(clean as f64 / sel.len().max(1) as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttackReport {
        strategy: outcome.strategy,
        per_frame_accuracy,
        key_ber: bit_error_rate(&outcome.key_guess, &t.true_key),
    })
}
