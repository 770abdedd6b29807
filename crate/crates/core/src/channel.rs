//! Geometric angle-of-departure channel model.
//!
//! A link is described by an [`AodProfile`]: a handful of complex path gains
//! on a discretized ring of departure angles. The flat-fading coefficient seen
//! through a given transmit antenna mode is the bilinear (unconjugated) inner
//! product of that profile with the mode's [`AntennaPattern`]. Rotating the
//! directional antenna through a [`ModeSet`] reweights the paths and so changes
//! the coefficient; the rotation is clocked by a [`RotationSchedule`].

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::phy::{Cx, SampleFrame};

/// Default angular grid: 360 bins of one degree.
pub const DEFAULT_BINS: usize = 360;

/// Default cap on the number of resolvable paths in a profile.
pub const DEFAULT_MAX_PATHS: usize = 4;

/// Sparse complex path gains indexed by departure-angle bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AodProfile {
    n_bins: usize,
    gains: BTreeMap<usize, Cx>,
}

impl AodProfile {
    pub fn empty(n_bins: usize) -> Self {
        Self {
            n_bins,
            gains: BTreeMap::new(),
        }
    }

    pub fn from_paths(n_bins: usize, paths: impl IntoIterator<Item = (usize, Cx)>) -> Result<Self> {
        let mut profile = Self::empty(n_bins);
        for (bin, gain) in paths {
            profile.set(bin, gain)?;
        }
        Ok(profile)
    }

    /// Sets the gain of one bin; a zero gain removes the bin.
    pub fn set(&mut self, bin: usize, gain: Cx) -> Result<()> {
        if bin >= self.n_bins {
            return invalid(format!("bin {bin} outside 0..{}", self.n_bins));
        }
        if !gain.re.is_finite() || !gain.im.is_finite() {
            return invalid(format!("non-finite path gain at bin {bin}"));
        }
        if gain == Cx::new(0.0, 0.0) {
            self.gains.remove(&bin);
        } else {
            self.gains.insert(bin, gain);
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn paths(&self) -> impl Iterator<Item = (usize, Cx)> + '_ {
        self.gains.iter().map(|(&b, &g)| (b, g))
    }

    pub fn n_paths(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    pub fn gain(&self, bin: usize) -> Cx {
        self.gains.get(&bin).copied().unwrap_or_default()
    }

    pub fn energy(&self) -> f64 {
        self.gains.values().map(|g| g.norm_sqr()).sum()
    }

    pub fn dense(&self) -> Vec<Cx> {
        let mut out = vec![Cx::default(); self.n_bins];
        for (&b, &g) in &self.gains {
            out[b] = g;
        }
        out
    }

    /// Rotates every path by `delta` bins.
    pub fn shifted(&self, delta: isize) -> Self {
        let n = self.n_bins as isize;
        let gains = self
            .gains
            .iter()
            .map(|(&b, &g)| (((b as isize + delta) % n + n) as usize % self.n_bins, g))
            .collect();
        Self {
            n_bins: self.n_bins,
            gains,
        }
    }

    /// `S_max` check: bounded path count with at least one path.
    pub fn validate(&self, max_paths: usize) -> Result<()> {
        if self.gains.is_empty() {
            return invalid("profile has no paths");
        }
        if self.gains.len() > max_paths {
            return invalid(format!("{} paths exceed the cap of {max_paths}", self.gains.len()));
        }
        Ok(())
    }

    /// Angle-indexed `[angle_deg, re, im]` rows for every bin.
    pub fn to_json_array(&self) -> serde_json::Value {
        angle_series_json(&self.dense())
    }
}

/// Exports a dense per-bin series as `[[angle_deg, re, im], ...]`.
pub fn angle_series_json(values: &[Cx]) -> serde_json::Value {
    let step = 360.0 / values.len().max(1) as f64;
    serde_json::Value::Array(
        values
            .iter()
            .enumerate()
            .map(|(i, v)| serde_json::json!([i as f64 * step, v.re, v.im]))
            .collect(),
    )
}

/// Complex gain per departure-angle bin for one antenna mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntennaPattern {
    pub mode_id: usize,
    pub gain: Vec<Cx>,
}

impl AntennaPattern {
    /// Unit gain in every direction.
    pub fn omni(n_bins: usize) -> Self {
        Self {
            mode_id: 0,
            gain: vec![Cx::new(1.0, 0.0); n_bins],
        }
    }

    pub fn n_bins(&self) -> usize {
        self.gain.len()
    }

    pub fn circular_shift(&self, bins: usize) -> Self {
        let n = self.gain.len();
        let gain = (0..n).map(|i| self.gain[(i + n - bins % n) % n]).collect();
        Self {
            mode_id: self.mode_id,
            gain,
        }
    }

    pub fn to_json_array(&self) -> serde_json::Value {
        angle_series_json(&self.gain)
    }
}

/// Shape of the synthetic log-periodic dipole array pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpdaShape {
    /// Angle off boresight where the magnitude falls to one half.
    pub beam_halfwidth_deg: f64,
    /// Magnitude outside the main lobe.
    pub sidelobe_floor: f64,
    /// Phase slope in radians per degree of offset from boresight.
    pub phase_slope: f64,
}

impl Default for LpdaShape {
    fn default() -> Self {
        Self {
            beam_halfwidth_deg: 60.0,
            sidelobe_floor: 0.05,
            phase_slope: 0.0,
        }
    }
}

impl LpdaShape {
    fn validate(&self) -> Result<()> {
        if !(self.beam_halfwidth_deg > 0.0 && self.beam_halfwidth_deg < 180.0) {
            return invalid(format!(
                "beam half-width must lie in (0, 180) degrees, got {}",
                self.beam_halfwidth_deg
            ));
        }
        if !(0.0..0.5).contains(&self.sidelobe_floor) {
            return invalid(format!(
                "sidelobe floor must lie in [0, 0.5), got {}",
                self.sidelobe_floor
            ));
        }
        if !self.phase_slope.is_finite() {
            return invalid("phase slope must be finite");
        }
        Ok(())
    }

    /// Half-extent of the raised-cosine lobe. Chosen so that
    /// `floor + (1 - floor) cos^2(pi/2 * hw / L) = 0.5`.
    fn lobe_extent_deg(&self) -> f64 {
        let f = self.sidelobe_floor;
        let c = ((0.5 - f) / (1.0 - f)).sqrt().acos();
        PI * self.beam_halfwidth_deg / (2.0 * c)
    }

    fn gain_at(&self, offset_deg: f64) -> Cx {
        let f = self.sidelobe_floor;
        let extent = self.lobe_extent_deg();
        let mag = if offset_deg.abs() < extent {
            f + (1.0 - f) * (PI * offset_deg / (2.0 * extent)).cos().powi(2)
        } else {
            f
        };
        Cx::from_polar(mag, self.phase_slope * offset_deg)
    }

    /// Samples the pattern on an `n_bins` grid with boresight at `steering_deg`.
    pub fn pattern(&self, steering_deg: f64, n_bins: usize, mode_id: usize) -> Result<AntennaPattern> {
        self.validate()?;
        if n_bins == 0 {
            return invalid("pattern needs at least one bin");
        }
        if !steering_deg.is_finite() {
            return invalid("steering angle must be finite");
        }
        let step = 360.0 / n_bins as f64;
        let gain = (0..n_bins)
            .map(|i| self.gain_at(wrap_deg(i as f64 * step - steering_deg)))
            .collect();
        Ok(AntennaPattern { mode_id, gain })
    }
}

/// Wraps an angle into [-180, 180).
fn wrap_deg(a: f64) -> f64 {
    (a + 180.0).rem_euclid(360.0) - 180.0
}

/// Directional main-lobe pattern with the default floor and phase slope.
pub fn lpda_pattern(beam_halfwidth_deg: f64, steering_deg: f64, n_bins: usize) -> Result<AntennaPattern> {
    LpdaShape {
        beam_halfwidth_deg,
        ..LpdaShape::default()
    }
    .pattern(steering_deg, n_bins, 0)
}

/// The antenna modes visited by the rotating antenna, indexed by `mode_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSet {
    patterns: Vec<AntennaPattern>,
}

impl ModeSet {
    /// Evaluates the shape directly at steering angles `k * 360 / m`. Unlike
    /// [`make_mode_set`] this works when the grid is not divisible by `m`.
    pub fn from_shape(shape: &LpdaShape, m: usize, n_bins: usize) -> Result<Self> {
        if m < 2 {
            return invalid(format!("a mode set needs at least 2 modes, got {m}"));
        }
        let patterns = (0..m)
            .map(|k| shape.pattern(k as f64 * 360.0 / m as f64, n_bins, k))
            .collect::<Result<_>>()?;
        Ok(Self { patterns })
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn n_bins(&self) -> usize {
        self.patterns[0].n_bins()
    }

    pub fn pattern(&self, mode_id: usize) -> &AntennaPattern {
        &self.patterns[mode_id]
    }

    pub fn patterns(&self) -> &[AntennaPattern] {
        &self.patterns
    }

    pub fn steering_deg(&self, mode_id: usize) -> f64 {
        mode_id as f64 * 360.0 / self.patterns.len() as f64
    }
}

/// Rotates `base` to steering angles `k * 360 / m` by circular shifts. The
/// grid size must be divisible by `m` so every shift is a whole bin count.
pub fn make_mode_set(base: &AntennaPattern, m: usize) -> Result<ModeSet> {
    if m < 2 {
        return invalid(format!("a mode set needs at least 2 modes, got {m}"));
    }
    let n = base.n_bins();
    if !n.is_multiple_of(m) {
        return invalid(format!("{n} bins cannot be split into {m} whole-bin rotations"));
    }
    let patterns = (0..m)
        .map(|k| {
            let mut p = base.circular_shift(k * n / m);
            p.mode_id = k;
            p
        })
        .collect();
    Ok(ModeSet { patterns })
}

/// `h = sum_bins profile[bin] * pattern[bin]`, with no conjugation.
pub fn csi_from_aod(profile: &AodProfile, pattern: &AntennaPattern) -> Result<Cx> {
    if profile.n_bins() != pattern.n_bins() {
        return invalid(format!(
            "profile has {} bins but pattern has {}",
            profile.n_bins(),
            pattern.n_bins()
        ));
    }
    Ok(profile.paths().map(|(b, g)| g * pattern.gain[b]).sum())
}

/// Which antenna mode is active in each transmission slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationSchedule {
    pub mode_of_frame: Vec<usize>,
    pub dwell_frames: usize,
    pub n_modes: usize,
}

impl RotationSchedule {
    /// A static antenna parked on one mode.
    pub fn fixed(mode_id: usize, n_modes: usize, n_frames: usize) -> Self {
        Self {
            mode_of_frame: vec![mode_id; n_frames],
            dwell_frames: n_frames.max(1),
            n_modes,
        }
    }

    pub fn mode(&self, frame: usize) -> usize {
        self.mode_of_frame[frame]
    }

    pub fn len(&self) -> usize {
        self.mode_of_frame.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mode_of_frame.is_empty()
    }
}

/// Seconds spent on each mode: one revolution divided among `m` modes.
pub fn mode_dwell_s(rpm: f64, m: usize) -> f64 {
    60.0 / (rpm * m as f64)
}

/// Cyclic mode schedule for an antenna turning at `rpm` with `m` modes per
/// revolution, sampled once per `frame_duration_s`.
pub fn make_rotation_schedule(rpm: f64, m: usize, frame_duration_s: f64, n_frames: usize) -> Result<RotationSchedule> {
    if !(rpm > 0.0) || !rpm.is_finite() {
        return invalid(format!("rotation rate must be positive, got {rpm}"));
    }
    if !(frame_duration_s > 0.0) || !frame_duration_s.is_finite() {
        return invalid(format!("frame duration must be positive, got {frame_duration_s}"));
    }
    if m < 1 {
        return invalid("schedule needs at least one mode");
    }
    if !(1.0..=5.0).contains(&rpm) {
        log::warn!("rotation rate {rpm} rpm is outside the 1-5 rpm range of the stepper rig");
    }
    let dwell = mode_dwell_s(rpm, m);
    let dwell_frames = ((dwell / frame_duration_s).round() as usize).max(1);
    let mode_of_frame = (0..n_frames).map(|f| (f / dwell_frames) % m).collect();
    Ok(RotationSchedule {
        mode_of_frame,
        dwell_frames,
        n_modes: m,
    })
}

/// Circularly-symmetric complex Gaussian sample with variance `power`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, power: f64) -> Cx {
    let sigma = (power / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Cx::new(re * sigma, im * sigma)
}

/// `y[i] = h_tx * tx[i] + h_jam * jam[i] + n[i]` with complex Gaussian noise
/// of variance `noise_power`.
pub fn propagate<R: Rng + ?Sized>(
    tx: &SampleFrame,
    h_tx: Cx,
    jam: Option<&SampleFrame>,
    h_jam: Cx,
    noise_power: f64,
    rng: &mut R,
) -> Result<SampleFrame> {
    if !(noise_power >= 0.0) {
        return invalid(format!("noise power must be non-negative, got {noise_power}"));
    }
    if let Some(j) = jam {
        if j.len() != tx.len() {
            return invalid(format!(
                "jam frame has {} samples, transmit frame {}",
                j.len(),
                tx.len()
            ));
        }
    }
    let samples = tx
        .samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let mut y = h_tx * x;
            if let Some(j) = jam {
                y += h_jam * j.samples[i];
            }
            if noise_power > 0.0 {
                y += complex_gaussian(rng, noise_power);
            }
            y
        })
        .collect();
    Ok(SampleFrame::new(samples))
}

fn circular_distance_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

const MAX_PROFILE_ATTEMPTS: usize = 100_000;

/// Random sparse multipath geometry. Bins are drawn uniformly by rejection so
/// every pair is at least `min_separation_deg` apart; the k-th path has
/// magnitude `gain_decay^k` with a uniform phase, and the result is scaled to
/// unit energy.
pub fn sample_multipath_profile<R: Rng + ?Sized>(
    rng: &mut R,
    n_bins: usize,
    n_paths: usize,
    min_separation_deg: f64,
    gain_decay: f64,
) -> Result<AodProfile> {
    if n_paths == 0 || n_paths > DEFAULT_MAX_PATHS {
        return invalid(format!("path count must lie in 1..={DEFAULT_MAX_PATHS}, got {n_paths}"));
    }
    if n_bins == 0 {
        return invalid("profile needs at least one bin");
    }
    if !(min_separation_deg >= 0.0) || n_paths as f64 * min_separation_deg >= 360.0 {
        return invalid(format!(
            "{n_paths} paths cannot be separated by {min_separation_deg} degrees"
        ));
    }
    if !(gain_decay > 0.0) || !gain_decay.is_finite() {
        return invalid(format!("gain decay must be positive, got {gain_decay}"));
    }
    let step = 360.0 / n_bins as f64;
    let bins = 'draw: {
        for _ in 0..MAX_PROFILE_ATTEMPTS {
            let candidate: Vec<usize> = (0..n_paths).map(|_| rng.random_range(0..n_bins)).collect();
            let separated = candidate.iter().enumerate().all(|(i, &a)| {
                candidate[i + 1..]
                    .iter()
                    .all(|&b| a != b && circular_distance_deg(a as f64 * step, b as f64 * step) >= min_separation_deg)
            });
            if separated {
                break 'draw candidate;
            }
        }
        return invalid(format!(
            "could not place {n_paths} paths {min_separation_deg} degrees apart on {n_bins} bins"
        ));
    };
    let raw: Vec<Cx> = (0..n_paths)
        .map(|k| Cx::from_polar(gain_decay.powi(k as i32), rng.random_range(-PI..PI)))
        .collect();
    let norm = raw.iter().map(|g| g.norm_sqr()).sum::<f64>().sqrt();
    AodProfile::from_paths(n_bins, bins.into_iter().zip(raw.into_iter().map(|g| g / norm)))
}
