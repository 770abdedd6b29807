//! Friendly-jamming key exchange with channel randomization.
//!
//! Alice first trains: she sends a known pilot on a subset of antenna modes,
//! Bob measures each CSI and feeds it back. With randomization on, Alice then
//! recovers the AoD profile, predicts every mode and precodes each frame so
//! that Bob always sees a unit channel while the antenna rotates. Every frame
//! carries a fresh block of key bits and is sent as identical copies within
//! one mode dwell; Bob jams every sample index in exactly one copy (pair
//! mode) and splices the clean samples back together.
//!
//! With randomization off the antenna stays on mode 0 and Alice does not
//! precode; Bob equalizes with the CSI he measured on mode 0.
//!
//! Noise and jam powers are referenced to Alice's un-precoded signal power
//! at Bob on mode 0, so `snr_db` is Bob's receive SNR on the static link.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{
    complex_gaussian, csi_from_aod, make_rotation_schedule, propagate, AntennaPattern, AodProfile, LpdaShape, ModeSet,
    RotationSchedule, DEFAULT_BINS,
};
use crate::csaod::{
    apply_precoder, compute_precoder, estimate_aod, predict_all, CsiMeasurementSet, Dictionary, Precoder, SolverKind,
    DEFAULT_POWER_CLAMP,
};
use crate::error::{invalid, Error, Result};
use crate::phy::{demodulate_bits, modulate_bits, Cx, OfdmConfig, SampleFrame};

/// Schema version written into every transcript.
pub const TRANSCRIPT_VERSION: u32 = 1;

/// Seed of the public pilot sequence. Everyone, Eve included, knows it.
const PILOT_SEED: u64 = 0x1a4d_9110_7e57_0001;

/// How Bob spreads his jamming over repeated copies of a frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum JamMode {
    /// Two copies; every sample index is jammed in exactly one of them.
    #[default]
    Pair,
    /// Bob jams each index of each copy with probability `jam_prob`; Alice
    /// keeps repeating until every index has been jammed at least once and
    /// left clean at least once, or `max_copies` is reached.
    Probabilistic { jam_prob: f64, max_copies: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyExchangeConfig {
    /// Key bits carried by one frame.
    pub key_bits: usize,
    /// Bob's receive SNR on the static link; `inf` means noiseless.
    #[serde(with = "db_value")]
    pub snr_db: f64,
    /// Bob's jam power relative to Alice's static-link signal at Bob.
    pub jam_to_signal_db: f64,
    pub randomization_on: bool,
    /// Bits per real component of the fed-back CSI; `None` feeds back exact values.
    pub feedback_quant_bits: Option<u32>,
    pub n_modes: usize,
    pub k_training_modes: usize,
    pub rpm: f64,
    /// Time between frames. One frame per mode dwell at the rig's top
    /// speed of 5 rpm.
    pub slot_duration_s: f64,
    /// Frames per session; the session key is their concatenation.
    pub n_frames: usize,
    /// Pilot length in OFDM blocks.
    pub pilot_blocks: usize,
    pub jam_mode: JamMode,
    pub ofdm: OfdmConfig,
    pub n_bins: usize,
    pub antenna: LpdaShape,
    pub solver: SolverKind,
    /// Model order of the recovered profile. Orders above the true path
    /// count overfit noisy measurements.
    pub sparsity: usize,
    /// Residual stop for AoD recovery; `None` picks 1e-6 for noiseless
    /// training and 1e-2 otherwise.
    pub residual_tol: Option<f64>,
    pub power_clamp: f64,
}

impl Default for KeyExchangeConfig {
    fn default() -> Self {
        Self {
            key_bits: 128,
            snr_db: 25.0,
            jam_to_signal_db: 0.0,
            randomization_on: true,
            feedback_quant_bits: None,
            n_modes: 5,
            k_training_modes: 4,
            rpm: 5.0,
            slot_duration_s: 2.4,
            n_frames: 5,
            pilot_blocks: 1,
            jam_mode: JamMode::Pair,
            ofdm: OfdmConfig::default(),
            n_bins: DEFAULT_BINS,
            antenna: LpdaShape::default(),
            solver: SolverKind::default(),
            sparsity: 2,
            residual_tol: None,
            power_clamp: DEFAULT_POWER_CLAMP,
        }
    }
}

impl KeyExchangeConfig {
    pub fn validate(&self) -> Result<()> {
        self.ofdm.validate()?;
        if self.key_bits == 0 || !self.key_bits.is_multiple_of(4) {
            return invalid(format!(
                "key_bits must be a positive multiple of 4, got {}",
                self.key_bits
            ));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return invalid("snr_db must be a number or +inf");
        }
        if !self.jam_to_signal_db.is_finite() {
            return invalid("jam_to_signal_db must be finite");
        }
        if self.n_modes < 2 {
            return invalid(format!("n_modes must be at least 2, got {}", self.n_modes));
        }
        if self.k_training_modes == 0 || self.k_training_modes > self.n_modes {
            return invalid(format!(
                "k_training_modes must lie in 1..={}, got {}",
                self.n_modes, self.k_training_modes
            ));
        }
        if self.n_frames == 0 {
            return invalid("n_frames must be at least 1");
        }
        if self.pilot_blocks == 0 {
            return invalid("pilot_blocks must be at least 1");
        }
        if self.sparsity == 0 {
            return invalid("sparsity must be at least 1");
        }
        if let Some(b) = self.feedback_quant_bits {
            if b == 0 || b > 52 {
                return invalid(format!("feedback_quant_bits must lie in 1..=52, got {b}"));
            }
        }
        if let JamMode::Probabilistic { jam_prob, max_copies } = self.jam_mode {
            if !(jam_prob > 0.0 && jam_prob < 1.0) {
                return invalid(format!("jam_prob must lie in (0, 1), got {jam_prob}"));
            }
            if max_copies < 2 {
                return invalid("max_copies must be at least 2");
            }
        }
        if !(self.power_clamp > 0.0) {
            return invalid("power_clamp must be positive");
        }
        if !(self.slot_duration_s > 0.0) || !(self.rpm > 0.0) {
            return invalid("slot_duration_s and rpm must be positive");
        }
        Ok(())
    }

    /// Noise and jam powers for a channel whose static-link power gain is
    /// `reference_gain`. A zero reference falls back to unit gain.
    pub fn link_budget(&self, reference_gain: f64) -> LinkBudget {
        let reference = if reference_gain > 0.0 { reference_gain } else { 1.0 };
        let noise_power = if self.snr_db == f64::INFINITY {
            0.0
        } else {
            reference * 10f64.powf(-self.snr_db / 10.0)
        };
        LinkBudget {
            noise_power,
            jam_power: reference * 10f64.powf(self.jam_to_signal_db / 10.0),
        }
    }

    fn effective_residual_tol(&self) -> f64 {
        self.residual_tol.unwrap_or({
            if self.snr_db == f64::INFINITY && self.feedback_quant_bits.is_none() {
                1e-6
            } else {
                1e-2
            }
        })
    }

    pub fn mode_set(&self) -> Result<ModeSet> {
        ModeSet::from_shape(&self.antenna, self.n_modes, self.n_bins)
    }

    /// Modes Alice trains on: the first K when rotating, only the parked
    /// mode 0 otherwise.
    pub fn training_modes(&self) -> Vec<usize> {
        if self.randomization_on {
            (0..self.k_training_modes).collect()
        } else {
            vec![0]
        }
    }
}

/// Per-sample noise variance at every receiver and Bob's jam power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub noise_power: f64,
    pub jam_power: f64,
}

/// Serializes dB values, writing infinities as the strings `"inf"`/`"-inf"`.
mod db_value {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => match t.as_str() {
                "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
                other => other.parse().map_err(serde::de::Error::custom),
            },
        }
    }
}

/// Bit vectors as compact `"0110..."` strings in JSON.
pub(crate) mod bit_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bits: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&bits.iter().map(|&b| if b == 0 { '0' } else { '1' }).collect::<String>())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        text.chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(serde::de::Error::custom(format!("invalid bit character {other:?}"))),
            })
            .collect()
    }

    pub mod nested {
        use super::*;
        use serde::ser::SerializeSeq;

        pub fn serialize<S: Serializer>(v: &[Vec<u8>], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for bits in v {
                seq.serialize_element(&bits.iter().map(|&b| if b == 0 { '0' } else { '1' }).collect::<String>())?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<u8>>, D::Error> {
            let texts = Vec::<String>::deserialize(d)?;
            texts
                .into_iter()
                .map(|t| {
                    t.chars()
                        .map(|c| match c {
                            '0' => Ok(0),
                            '1' => Ok(1),
                            other => Err(serde::de::Error::custom(format!("invalid bit character {other:?}"))),
                        })
                        .collect()
                })
                .collect()
        }
    }
}

/// The hidden geometry of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelState {
    pub alice_bob: AodProfile,
    /// One independent profile per Eve antenna.
    pub alice_eve: Vec<AodProfile>,
    /// Paths from Bob's omnidirectional jamming antenna to each Eve antenna.
    pub bob_eve: Vec<AodProfile>,
}

impl ChannelState {
    pub fn validate(&self, n_bins: usize) -> Result<()> {
        if self.alice_eve.is_empty() || self.alice_eve.len() != self.bob_eve.len() {
            return invalid(format!(
                "need matching non-empty Eve link lists, got {} and {}",
                self.alice_eve.len(),
                self.bob_eve.len()
            ));
        }
        for p in std::iter::once(&self.alice_bob)
            .chain(&self.alice_eve)
            .chain(&self.bob_eve)
        {
            if p.n_bins() != n_bins {
                return invalid(format!("profile has {} bins, expected {n_bins}", p.n_bins()));
            }
        }
        Ok(())
    }

    pub fn n_eve_antennas(&self) -> usize {
        self.alice_eve.len()
    }

    /// Power gain of the static Alice-Bob link on mode 0.
    pub fn reference_gain(&self, modes: &ModeSet) -> f64 {
        self.bob_csi(modes, 0).norm_sqr()
    }

    pub fn bob_csi(&self, modes: &ModeSet, mode_id: usize) -> Cx {
        csi_from_aod(&self.alice_bob, modes.pattern(mode_id)).expect("validated bins")
    }

    pub fn eve_csi(&self, modes: &ModeSet, antenna: usize, mode_id: usize) -> Cx {
        csi_from_aod(&self.alice_eve[antenna], modes.pattern(mode_id)).expect("validated bins")
    }

    /// Jamming channel from Bob to one Eve antenna.
    pub fn jam_csi_eve(&self, antenna: usize) -> Cx {
        let p = &self.bob_eve[antenna];
        csi_from_aod(p, &AntennaPattern::omni(p.n_bins())).expect("matching bins")
    }
}

/// Per-sample copy selection: 0 jams copy A at that index, 1 jams copy B.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JamSchedule {
    #[serde(with = "bit_string")]
    pub copy_choice: Vec<u8>,
}

impl JamSchedule {
    pub fn len(&self) -> usize {
        self.copy_choice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.copy_choice.is_empty()
    }

    /// Index of the copy jammed at sample `i`.
    pub fn jammed_copy(&self, i: usize) -> usize {
        self.copy_choice[i] as usize
    }
}

/// Bob's jamming plan for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum JamPlan {
    Pair {
        schedule: JamSchedule,
    },
    /// `masks[copy]` has a `1` at every jammed index.
    Masks {
        #[serde(with = "bit_string::nested")]
        masks: Vec<Vec<u8>>,
    },
}

impl JamPlan {
    pub fn n_copies(&self) -> usize {
        match self {
            JamPlan::Pair { .. } => 2,
            JamPlan::Masks { masks } => masks.len(),
        }
    }

    pub fn frame_len(&self) -> usize {
        match self {
            JamPlan::Pair { schedule } => schedule.len(),
            JamPlan::Masks { masks } => masks.first().map_or(0, Vec::len),
        }
    }

    pub fn is_jammed(&self, copy: usize, i: usize) -> bool {
        match self {
            JamPlan::Pair { schedule } => schedule.jammed_copy(i) == copy,
            JamPlan::Masks { masks } => masks[copy][i] == 1,
        }
    }

    /// First copy left clean at index `i`, if any.
    pub fn clean_copy(&self, i: usize) -> Option<usize> {
        (0..self.n_copies()).find(|&c| !self.is_jammed(c, i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub mode_id: usize,
    pub bob_rx: SampleFrame,
    /// Pilot as heard by each Eve antenna.
    pub eve_rx: Vec<SampleFrame>,
    /// Bob's least-squares estimate.
    pub measured: Cx,
    /// Value Alice receives after optional quantization.
    pub fed_back: Cx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    /// Transmission slot in the rotation schedule.
    pub slot: usize,
    pub mode_id: usize,
    pub precoder: Cx,
    /// Precoded samples; every copy carries the same samples.
    pub tx: SampleFrame,
    /// Bob's reception of each copy, including his own jamming.
    pub bob_rx: Vec<SampleFrame>,
    /// `eve_rx[antenna][copy]`.
    pub eve_rx: Vec<Vec<SampleFrame>>,
    pub jam: JamPlan,
    /// Key bits this frame carries.
    #[serde(with = "bit_string")]
    pub key_bits: Vec<u8>,
    /// Bits Bob demodulated from this frame.
    #[serde(with = "bit_string")]
    pub bob_bits: Vec<u8>,
}

/// Complete record of one exchange, ground truth included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub version: u32,
    pub config: KeyExchangeConfig,
    #[serde(with = "bit_string")]
    pub true_key: Vec<u8>,
    #[serde(with = "bit_string")]
    pub bob_key: Vec<u8>,
    pub channel: ChannelState,
    pub budget: LinkBudget,
    pub pilot: SampleFrame,
    pub training: Vec<TrainingRecord>,
    pub estimated_profile: Option<AodProfile>,
    pub precoder: Precoder,
    pub schedule: RotationSchedule,
    pub frames: Vec<FrameRecord>,
}

impl Transcript {
    pub fn n_eve_antennas(&self) -> usize {
        self.channel.n_eve_antennas()
    }

    /// QAM symbol slots put on the air: every copy of every key frame plus
    /// every training pilot.
    pub fn transmitted_symbols(&self) -> usize {
        let n = self.config.ofdm.n_subcarriers;
        let frame_symbols = self.config.ofdm.blocks_for(self.config.key_bits / 4).max(1) * n;
        let payload: usize = self.frames.iter().map(|f| f.jam.n_copies() * frame_symbols).sum();
        payload + self.training.len() * self.config.pilot_blocks * n
    }

    /// Eve's per-frame effective channel `h_E(m) * w(m)` on one antenna.
    pub fn eve_effective_channels(&self, antenna: usize) -> Result<Vec<Cx>> {
        let modes = self.config.mode_set()?;
        Ok(self
            .frames
            .iter()
            .map(|f| self.channel.eve_csi(&modes, antenna, f.mode_id) * f.precoder)
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Transcript = serde_json::from_str(text)?;
        if t.version != TRANSCRIPT_VERSION {
            return invalid(format!(
                "transcript version {} is not supported (expected {TRANSCRIPT_VERSION})",
                t.version
            ));
        }
        Ok(t)
    }

    pub fn check_consistency(&self) -> Result<()> {
        if self.frames.is_empty() {
            return invalid("transcript has no frames");
        }
        let len = self.frames[0].tx.len();
        for f in &self.frames {
            let copies = f.jam.n_copies();
            if f.tx.len() != len || f.jam.frame_len() != len {
                return invalid("frame lengths disagree");
            }
            if f.bob_rx.len() != copies || f.bob_rx.iter().any(|r| r.len() != len) {
                return invalid("Bob's receptions do not match the jam plan");
            }
            if f.eve_rx.len() != self.n_eve_antennas()
                || f.eve_rx
                    .iter()
                    .any(|a| a.len() != copies || a.iter().any(|r| r.len() != len))
            {
                return invalid("Eve's receptions do not match the jam plan");
            }
            if let JamPlan::Pair { schedule } = &f.jam {
                if schedule.copy_choice.iter().any(|&c| c > 1) {
                    return invalid("pair schedule entries must be 0 or 1");
                }
            }
        }
        Ok(())
    }
}

/// Uniform i.i.d. key bits.
pub fn generate_key<R: Rng + ?Sized>(rng: &mut R, n_bits: usize) -> Vec<u8> {
    (0..n_bits).map(|_| rng.random_range(0..2u8)).collect()
}

/// The public pilot: `blocks` OFDM blocks of pseudo-random 16-QAM symbols.
pub fn known_pilot(ofdm: &OfdmConfig, blocks: usize) -> Result<SampleFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(PILOT_SEED);
    let bits = generate_key(&mut rng, blocks * ofdm.n_subcarriers * 4);
    modulate_bits(&bits, ofdm)
}

/// Least-squares scalar channel `<known, rx> / <known, known>`.
pub fn bob_measure_csi(rx_pilot: &SampleFrame, known_pilot: &SampleFrame) -> Result<Cx> {
    if rx_pilot.len() != known_pilot.len() {
        return invalid(format!(
            "received pilot has {} samples, known pilot {}",
            rx_pilot.len(),
            known_pilot.len()
        ));
    }
    let energy = known_pilot.energy();
    if energy == 0.0 {
        return invalid("pilot has zero energy");
    }
    let corr: Cx = known_pilot
        .samples
        .iter()
        .zip(&rx_pilot.samples)
        .map(|(k, r)| k.conj() * r)
        .sum();
    Ok(corr / energy)
}

/// Uniform mid-rise quantizer over [-2, 2] per real component.
pub fn quantize_feedback(h: Cx, bits: u32) -> Cx {
    let levels = (1u64 << bits) as f64;
    let step = 4.0 / levels;
    let q = |v: f64| {
        let idx = ((v + 2.0) / step).floor().clamp(0.0, levels - 1.0);
        -2.0 + (idx + 0.5) * step
    };
    Cx::new(q(h.re), q(h.im))
}

pub struct TrainingOutcome {
    pub measurements: CsiMeasurementSet,
    pub records: Vec<TrainingRecord>,
}

/// Alice sends the un-precoded pilot once per listed mode; Bob measures and
/// feeds back, and every Eve antenna overhears the pilot.
#[allow(clippy::too_many_arguments)]
pub fn training_phase<R: Rng + ?Sized, E: Rng + ?Sized>(
    modes: &ModeSet,
    channel: &ChannelState,
    mode_ids: &[usize],
    pilot: &SampleFrame,
    feedback_quant_bits: Option<u32>,
    noise: f64,
    rng: &mut R,
    eve_rng: &mut E,
) -> Result<TrainingOutcome> {
    if mode_ids.is_empty() || mode_ids.len() > modes.len() {
        return invalid(format!("cannot train {} of {} modes", mode_ids.len(), modes.len()));
    }
    let mut records = Vec::with_capacity(mode_ids.len());
    for &m in mode_ids {
        if m >= modes.len() {
            return invalid(format!("mode {m} not in the mode set"));
        }
        let bob_rx = propagate(pilot, channel.bob_csi(modes, m), None, Cx::default(), noise, rng)?;
        let measured = bob_measure_csi(&bob_rx, pilot)?;
        let fed_back = match feedback_quant_bits {
            Some(b) => quantize_feedback(measured, b),
            None => measured,
        };
        let eve_rx = (0..channel.n_eve_antennas())
            .map(|a| propagate(pilot, channel.eve_csi(modes, a, m), None, Cx::default(), noise, eve_rng))
            .collect::<Result<_>>()?;
        records.push(TrainingRecord {
            mode_id: m,
            bob_rx,
            eve_rx,
            measured,
            fed_back,
        });
    }
    let measurements = CsiMeasurementSet::new(records.iter().map(|r| (r.mode_id, r.fed_back)).collect())?;
    Ok(TrainingOutcome { measurements, records })
}

/// A fair coin per sample index.
pub fn bob_make_jam_schedule<R: Rng + ?Sized>(rng: &mut R, frame_len: usize) -> JamSchedule {
    JamSchedule {
        copy_choice: (0..frame_len).map(|_| rng.random_range(0..2u8)).collect(),
    }
}

/// Complex Gaussian jamming samples of per-sample variance `power`.
pub fn make_jam_frame<R: Rng + ?Sized>(rng: &mut R, frame_len: usize, power: f64) -> SampleFrame {
    if power == 0.0 {
        return SampleFrame::zeros(frame_len);
    }
    SampleFrame::new((0..frame_len).map(|_| complex_gaussian(rng, power)).collect())
}

/// Keeps, at every index, the copy Bob did not jam.
pub fn bob_splice(rx_a: &SampleFrame, rx_b: &SampleFrame, sched: &JamSchedule) -> Result<SampleFrame> {
    if rx_a.len() != rx_b.len() || rx_a.len() != sched.len() {
        return invalid(format!(
            "splice lengths differ: {} / {} / schedule {}",
            rx_a.len(),
            rx_b.len(),
            sched.len()
        ));
    }
    let samples = (0..rx_a.len())
        .map(|i| {
            if sched.jammed_copy(i) == 0 {
                rx_b.samples[i]
            } else {
                rx_a.samples[i]
            }
        })
        .collect();
    Ok(SampleFrame::new(samples))
}

fn splice_plan(rx: &[SampleFrame], plan: &JamPlan) -> Result<SampleFrame> {
    match plan {
        JamPlan::Pair { schedule } => bob_splice(&rx[0], &rx[1], schedule),
        JamPlan::Masks { .. } => {
            let len = plan.frame_len();
            // An index never left clean falls back to copy 0.
            let samples = (0..len)
                .map(|i| rx[plan.clean_copy(i).unwrap_or(0)].samples[i])
                .collect();
            Ok(SampleFrame::new(samples))
        }
    }
}

fn draw_jam_plan<R: Rng + ?Sized>(rng: &mut R, mode: JamMode, len: usize) -> JamPlan {
    match mode {
        JamMode::Pair => JamPlan::Pair {
            schedule: bob_make_jam_schedule(rng, len),
        },
        JamMode::Probabilistic { jam_prob, max_copies } => {
            let mut masks: Vec<Vec<u8>> = Vec::new();
            let mut jammed = vec![false; len];
            let mut clean = vec![false; len];
            while masks.len() < max_copies && !(jammed.iter().all(|&j| j) && clean.iter().all(|&c| c)) {
                let mask: Vec<u8> = (0..len).map(|_| u8::from(rng.random_bool(jam_prob))).collect();
                for (i, &m) in mask.iter().enumerate() {
                    if m == 1 {
                        jammed[i] = true;
                    } else {
                        clean[i] = true;
                    }
                }
                masks.push(mask);
            }
            JamPlan::Masks { masks }
        }
    }
}

/// Runs training, channel prediction and the jammed key transfer.
pub fn run_key_exchange<R: Rng + ?Sized>(
    cfg: &KeyExchangeConfig,
    channel: &ChannelState,
    rng: &mut R,
) -> Result<Transcript> {
    cfg.validate()?;
    channel.validate(cfg.n_bins)?;
    let modes = cfg.mode_set()?;
    let pilot = known_pilot(&cfg.ofdm, cfg.pilot_blocks)?;
    let budget = cfg.link_budget(channel.reference_gain(&modes));
    // Eve's receiver noise comes from its own stream so that Alice and Bob
    // see the same draws whatever Eve's antenna count.
    let mut eve_rng = ChaCha8Rng::seed_from_u64(rng.random());

    let training = training_phase(
        &modes,
        channel,
        &cfg.training_modes(),
        &pilot,
        cfg.feedback_quant_bits,
        budget.noise_power,
        rng,
        &mut eve_rng,
    )?;

    let (precoder, estimated_profile, bob_equalizer) = if cfg.randomization_on {
        let dict = Dictionary::from_modes(&modes, &cfg.training_modes())?;
        let sparsity = cfg.sparsity.min(training.measurements.len());
        let est = estimate_aod(
            &training.measurements,
            &dict,
            cfg.solver,
            sparsity,
            cfg.effective_residual_tol(),
        )?;
        let pre = compute_precoder(&predict_all(&est.profile, &modes)?, cfg.power_clamp)?;
        (pre, Some(est.profile), Cx::new(1.0, 0.0))
    } else {
        let measured = training.records[0].measured;
        let eq = if measured == Cx::default() {
            Cx::new(1.0, 0.0)
        } else {
            measured.inv()
        };
        (Precoder::identity(cfg.n_modes), None, eq)
    };
    if (0..cfg.n_modes).all(|m| !precoder.is_usable(m)) {
        return Err(Error::Aborted("no antenna mode has a usable precoder".into()));
    }

    let max_slots = cfg.n_frames * cfg.n_modes;
    let schedule = if cfg.randomization_on {
        make_rotation_schedule(cfg.rpm, cfg.n_modes, cfg.slot_duration_s, max_slots)?
    } else {
        RotationSchedule::fixed(0, cfg.n_modes, max_slots)
    };

    let mut frames = Vec::with_capacity(cfg.n_frames);
    for slot in 0..schedule.len() {
        if frames.len() == cfg.n_frames {
            break;
        }
        let mode_id = schedule.mode(slot);
        if !precoder.is_usable(mode_id) {
            log::debug!("skipping slot {slot}: mode {mode_id} has no usable precoder");
            continue;
        }
        let key_bits = generate_key(rng, cfg.key_bits);
        let clean = modulate_bits(&key_bits, &cfg.ofdm)?;
        let len = clean.len();
        let w = precoder.weight(mode_id);
        let tx = apply_precoder(&clean, w);
        let h_bob = channel.bob_csi(&modes, mode_id);
        let plan = draw_jam_plan(rng, cfg.jam_mode, len);

        let mut bob_rx = Vec::with_capacity(plan.n_copies());
        let mut eve_rx = vec![Vec::with_capacity(plan.n_copies()); channel.n_eve_antennas()];
        for copy in 0..plan.n_copies() {
            let mut jam = make_jam_frame(rng, len, budget.jam_power);
            for (i, s) in jam.samples.iter_mut().enumerate() {
                if !plan.is_jammed(copy, i) {
                    *s = Cx::default();
                }
            }
            // Bob's own jam reaches his receiver through a known unit coupling.
            bob_rx.push(propagate(
                &tx,
                h_bob,
                Some(&jam),
                Cx::new(1.0, 0.0),
                budget.noise_power,
                rng,
            )?);
            for (a, rx) in eve_rx.iter_mut().enumerate() {
                rx.push(propagate(
                    &tx,
                    channel.eve_csi(&modes, a, mode_id),
                    Some(&jam),
                    channel.jam_csi_eve(a),
                    budget.noise_power,
                    &mut eve_rng,
                )?);
            }
        }

        let spliced = splice_plan(&bob_rx, &plan)?;
        let equalized = apply_precoder(&spliced, bob_equalizer);
        let bob_bits = demodulate_bits(&equalized, cfg.key_bits, &cfg.ofdm)?;
        frames.push(FrameRecord {
            slot,
            mode_id,
            precoder: w,
            tx,
            bob_rx,
            eve_rx,
            jam: plan,
            key_bits,
            bob_bits,
        });
    }
    if frames.is_empty() {
        return Err(Error::Aborted("no frame could be transmitted".into()));
    }

    Ok(Transcript {
        version: TRANSCRIPT_VERSION,
        config: cfg.clone(),
        true_key: frames.iter().flat_map(|f| f.key_bits.iter().copied()).collect(),
        bob_key: frames.iter().flat_map(|f| f.bob_bits.iter().copied()).collect(),
        channel: channel.clone(),
        budget,
        pilot,
        training: training.records,
        estimated_profile,
        precoder,
        schedule,
        frames,
    })
}
