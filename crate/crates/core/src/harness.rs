//! Seeded Monte Carlo scenarios, metrics and result export.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adversary::{evaluate_attack, eve_attack, EveConfig, EveStrategy, EveView};
use crate::channel::sample_multipath_profile;
use crate::error::{invalid, Error, Result};
use crate::phy::{bit_error_rate, Cx};
use crate::protocol::{run_key_exchange, ChannelState, KeyExchangeConfig, Transcript};

const STREAMS_PER_TRIAL: u64 = 4;
pub const CHANNEL_STREAM: u64 = 0;
pub const EXCHANGE_STREAM: u64 = 1;
pub const EVE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub trials: usize,
    pub eve_antennas: usize,
    pub eve_strategy: EveStrategy,
    /// Paths per link.
    pub n_paths: usize,
    pub min_separation_deg: f64,
    pub gain_decay: f64,
    #[serde(flatten)]
    pub exchange: KeyExchangeConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            trials: 200,
            eve_antennas: 2,
            eve_strategy: EveStrategy::Divergence,
            n_paths: 2,
            min_separation_deg: 60.0,
            gain_decay: 0.6,
            exchange: KeyExchangeConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return invalid("trials must be at least 1");
        }
        if self.eve_antennas == 0 {
            return invalid("eve_antennas must be at least 1");
        }
        if self.n_paths == 0 {
            return invalid("n_paths must be at least 1");
        }
        if !(self.gain_decay > 0.0 && self.gain_decay <= 1.0) {
            return invalid(format!("gain_decay must lie in (0, 1], got {}", self.gain_decay));
        }
        if !(self.min_separation_deg >= 0.0) {
            return invalid("min_separation_deg must be non-negative");
        }
        self.eve_config().validate()?;
        self.exchange.validate()
    }

    /// Eve's configuration, with the single-antenna fallback applied.
    pub fn eve_config(&self) -> EveConfig {
        EveConfig::resolved(self.eve_antennas, self.eve_strategy)
    }

    /// Parses a possibly partial config; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let known = serde_json::to_value(Self::default())?;
        if let (Value::Object(given), Value::Object(known)) = (&value, &known) {
            if let Some(k) = given.keys().find(|k| !known.contains_key(*k)) {
                return invalid(format!("unknown config key {k:?}"));
            }
        }
        let cfg: Self = serde_json::from_value(value)?;
        Ok(cfg)
    }

    /// Names accepted by [`ScenarioConfig::with_field`]; nested fields use dots.
    pub fn field_names() -> Vec<String> {
        fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
            if let Value::Object(map) = v {
                for (k, child) in map {
                    let name = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    if matches!(child, Value::Object(_)) && k != "jam_mode" {
                        walk(&name, child, out);
                    } else {
                        out.push(name);
                    }
                }
            }
        }
        let mut out = Vec::new();
        walk(
            "",
            &serde_json::to_value(Self::default()).expect("config serializes"),
            &mut out,
        );
        out.sort();
        out
    }

    /// Copy with one field replaced. `field` is a name from
    /// [`ScenarioConfig::field_names`].
    pub fn with_field(&self, field: &str, value: &Value) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        let mut slot = &mut root;
        for part in field.split('.') {
            slot = match slot.get_mut(part) {
                Some(s) => s,
                None => {
                    return invalid(format!(
                        "unknown field {field:?}; valid fields: {}",
                        Self::field_names().join(", ")
                    ))
                }
            };
        }
        *slot = value.clone();
        let cfg: Self = serde_json::from_value(root)
            .map_err(|e| Error::InvalidInput(format!("bad value {value} for {field}: {e}")))?;
        Ok(cfg)
    }
}

/// One row of `results.csv`. Column order is the field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub trial: usize,
    pub seed: u64,
    #[serde(serialize_with = "ser_db")]
    pub snr_db: f64,
    pub jam_to_signal_db: f64,
    pub randomization_on: bool,
    pub n_modes: usize,
    pub k_training_modes: usize,
    pub rpm: f64,
    pub eve_antennas: usize,
    pub eve_strategy: EveStrategy,
    pub key_bits: usize,
    pub n_paths: usize,
    /// `ok` or `aborted`.
    pub status: String,
    pub bob_ber: Option<f64>,
    pub eve_ber: Option<f64>,
    /// Empty when the strategy does not classify samples.
    pub eve_classification_accuracy: Option<f64>,
    pub key_agreed: bool,
    pub frames_sent: usize,
    pub key_rate_bits_per_symbol: f64,
    pub eve_channel_entropy_bits: f64,
}

/// Header of `results.csv`.
pub const RESULTS_HEADER: &str = "trial,seed,snr_db,jam_to_signal_db,randomization_on,n_modes,k_training_modes,rpm,eve_antennas,eve_strategy,key_bits,n_paths,status,bob_ber,eve_ber,eve_classification_accuracy,key_agreed,frames_sent,key_rate_bits_per_symbol,eve_channel_entropy_bits";

fn ser_db<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    }
}

impl ResultRecord {
    fn echo(cfg: &ScenarioConfig, trial: usize) -> Self {
        let x = &cfg.exchange;
        Self {
            trial,
            seed: cfg.seed,
            snr_db: x.snr_db,
            jam_to_signal_db: x.jam_to_signal_db,
            randomization_on: x.randomization_on,
            n_modes: x.n_modes,
            k_training_modes: x.k_training_modes,
            rpm: x.rpm,
            eve_antennas: cfg.eve_antennas,
            eve_strategy: cfg.eve_config().strategy,
            key_bits: x.key_bits,
            n_paths: cfg.n_paths,
            status: "aborted".into(),
            bob_ber: None,
            eve_ber: None,
            eve_classification_accuracy: None,
            key_agreed: false,
            frames_sent: 0,
            key_rate_bits_per_symbol: 0.0,
            eve_channel_entropy_bits: 0.0,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Generator for one trial's stream; streams never overlap across trials.
pub fn trial_rng(seed: u64, trial: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64 * STREAMS_PER_TRIAL + stream);
    rng
}

/// Draws every link of one trial. Eve's links are drawn antenna by antenna
/// after Bob's, so adding antennas leaves the earlier links unchanged.
pub fn draw_channel_state(cfg: &ScenarioConfig, trial: usize) -> Result<ChannelState> {
    let mut rng = trial_rng(cfg.seed, trial, CHANNEL_STREAM);
    let n_bins = cfg.exchange.n_bins;
    let draw = |rng: &mut ChaCha8Rng| {
        sample_multipath_profile(rng, n_bins, cfg.n_paths, cfg.min_separation_deg, cfg.gain_decay)
    };
    let alice_bob = draw(&mut rng)?;
    let mut alice_eve = Vec::with_capacity(cfg.eve_antennas);
    let mut bob_eve = Vec::with_capacity(cfg.eve_antennas);
    for _ in 0..cfg.eve_antennas {
        alice_eve.push(draw(&mut rng)?);
        bob_eve.push(draw(&mut rng)?);
    }
    Ok(ChannelState {
        alice_bob,
        alice_eve,
        bob_eve,
    })
}

/// Plug-in entropy in bits of `values` on an 8x8 magnitude/phase grid
/// covering magnitudes `[0, mag_ceiling)` and phases `[-pi, pi]`.
pub fn entropy_on_grid(values: &[Cx], mag_ceiling: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for v in values {
        let mag = if mag_ceiling > 0.0 {
            ((v.norm() / mag_ceiling * 8.0).floor() as usize).min(7)
        } else {
            0
        };
        let phase = (((v.arg() + std::f64::consts::PI) / std::f64::consts::TAU * 8.0).floor() as usize).min(7);
        *counts.entry((mag, phase)).or_default() += 1;
    }
    let n = values.len() as f64;
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

/// Entropy of Eve's per-frame effective channels with the magnitude axis
/// spanning twice the largest magnitude.
pub fn eve_channel_entropy(effective: &[Cx]) -> f64 {
    let max = effective.iter().map(|h| h.norm()).fold(0.0, f64::max);
    entropy_on_grid(effective, 2.0 * max)
}

/// Key bits per transmitted QAM symbol slot, counting every copy and every
/// training pilot.
pub fn key_rate(t: &Transcript) -> f64 {
    let symbols = t.transmitted_symbols();
    if symbols == 0 {
        0.0
    } else {
        t.true_key.len() as f64 / symbols as f64
    }
}

/// Runs one trial. The transcript is returned when the exchange completed.
pub fn run_trial(cfg: &ScenarioConfig, trial: usize) -> Result<(ResultRecord, Option<Transcript>)> {
    let mut record = ResultRecord::echo(cfg, trial);
    let channel = draw_channel_state(cfg, trial)?;
    let mut rng = trial_rng(cfg.seed, trial, EXCHANGE_STREAM);
    let t = match run_key_exchange(&cfg.exchange, &channel, &mut rng) {
        Ok(t) => t,
        Err(Error::Aborted(reason)) => {
            log::info!("trial {trial} aborted: {reason}");
            return Ok((record, None));
        }
        Err(e) => return Err(e),
    };
    let eve_cfg = cfg.eve_config();
    let view = if eve_cfg.strategy == EveStrategy::OracleEqualized {
        EveView::with_oracle(&t)?
    } else {
        EveView::from_transcript(&t)
    };
    let outcome = eve_attack(&view, &eve_cfg, &mut trial_rng(cfg.seed, trial, EVE_STREAM))?;
    let report = evaluate_attack(&t, &outcome)?;

    record.status = "ok".into();
    record.bob_ber = Some(bit_error_rate(&t.bob_key, &t.true_key));
    record.eve_ber = Some(report.key_ber);
    record.eve_classification_accuracy = report.mean_accuracy();
    record.key_agreed = t.bob_key == t.true_key;
    record.frames_sent = t.frames.len();
    record.key_rate_bits_per_symbol = key_rate(&t);
    record.eve_channel_entropy_bits = eve_channel_entropy(&t.eve_effective_channels(0)?);
    Ok((record, Some(t)))
}

/// Runs every trial in parallel; records come back in trial order.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Vec<ResultRecord>> {
    cfg.validate()?;
    (0..cfg.trials)
        .into_par_iter()
        .map(|trial| run_trial(cfg, trial).map(|(r, _)| r))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            count: values.len(),
        })
    }
}

/// Aggregates written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ScenarioConfig,
    pub trials: usize,
    pub completed: usize,
    pub aborted: usize,
    /// Metric name to statistics over completed trials.
    pub metrics: BTreeMap<String, Option<Stat>>,
}

pub const METRICS: [&str; 6] = [
    "bob_ber",
    "eve_ber",
    "eve_classification_accuracy",
    "key_agreed",
    "key_rate_bits_per_symbol",
    "eve_channel_entropy_bits",
];

fn metric(r: &ResultRecord, name: &str) -> Option<f64> {
    match name {
        "bob_ber" => r.bob_ber,
        "eve_ber" => r.eve_ber,
        "eve_classification_accuracy" => r.eve_classification_accuracy,
        "key_agreed" => Some(if r.key_agreed { 1.0 } else { 0.0 }),
        "key_rate_bits_per_symbol" => Some(r.key_rate_bits_per_symbol),
        "eve_channel_entropy_bits" => Some(r.eve_channel_entropy_bits),
        _ => None,
    }
}

pub fn summarize(cfg: &ScenarioConfig, records: &[ResultRecord]) -> Summary {
    let completed: Vec<&ResultRecord> = records.iter().filter(|r| r.is_ok()).collect();
    let metrics = METRICS
        .iter()
        .map(|&name| {
            let values: Vec<f64> = completed.iter().filter_map(|r| metric(r, name)).collect();
            (name.to_string(), Stat::of(&values))
        })
        .collect();
    Summary {
        config: cfg.clone(),
        trials: records.len(),
        completed: completed.len(),
        aborted: records.len() - completed.len(),
        metrics,
    }
}

impl Summary {
    pub fn mean(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied().flatten().map(|s| s.mean)
    }
}

pub fn write_results_csv(path: &Path, records: &[ResultRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(RESULTS_HEADER.split(','))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != RESULTS_HEADER {
        return invalid("results.csv header does not match");
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let mut rec: ResultRecord = row.deserialize(None).or_else(|_| {
            // `inf` SNR is written as text.
            let mut fixed = row.clone();
            if &fixed[2] == "inf" {
                let cells: Vec<String> = fixed
                    .iter()
                    .enumerate()
                    .map(|(i, c)| if i == 2 { "0".to_string() } else { c.to_string() })
                    .collect();
                fixed = csv::StringRecord::from(cells);
            }
            fixed.deserialize::<ResultRecord>(None)
        })?;
        if &row[2] == "inf" {
            rec.snr_db = f64::INFINITY;
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// One aggregated row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: Value,
    pub summary: Summary,
}

/// Runs the base scenario once per axis value.
pub fn sweep(base: &ScenarioConfig, axis: &str, values: &[Value]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return invalid("a sweep needs at least one value");
    }
    let configs = values
        .iter()
        .map(|v| base.with_field(axis, v))
        .collect::<Result<Vec<_>>>()?;
    for c in &configs {
        c.validate()?;
    }
    configs
        .into_iter()
        .zip(values)
        .map(|(cfg, v)| {
            let records = run_scenario(&cfg)?;
            Ok(SweepRow {
                axis: axis.to_string(),
                value: v.clone(),
                summary: summarize(&cfg, &records),
            })
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["axis".to_string(), "value".into(), "completed".into(), "aborted".into()];
    for m in METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header)?;
    for row in rows {
        let mut cells = vec![
            row.axis.clone(),
            row.value.to_string(),
            row.summary.completed.to_string(),
            row.summary.aborted.to_string(),
        ];
        for m in METRICS {
            match row.summary.metrics.get(m).copied().flatten() {
                Some(s) => {
                    cells.push(s.mean.to_string());
                    cells.push(s.std.to_string());
                }
                None => {
                    cells.push(String::new());
                    cells.push(String::new());
                }
            }
        }
        w.write_record(&cells)?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of one self-test check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Fast invariant suite behind the `selftest` command.
pub fn selftest() -> Vec<Check> {
    use crate::csaod::{compute_precoder, estimate_aod, predict_all, CsiMeasurementSet, Dictionary, SolverKind};
    use crate::phy::{demodulate_bits, modulate_bits, OfdmConfig};

    let mut checks = Vec::new();
    let mut push = |name: &'static str, result: Result<String>, passed: fn(&str) -> bool| {
        let (ok, detail) = match result {
            Ok(d) => (passed(&d), d),
            Err(e) => (false, e.to_string()),
        };
        checks.push(Check {
            name,
            passed: ok,
            detail,
        });
    };

    push(
        "modem loopback",
        (|| {
            let ofdm = OfdmConfig::default();
            let bits = crate::protocol::generate_key(&mut ChaCha8Rng::seed_from_u64(3), 4096);
            let back = demodulate_bits(&modulate_bits(&bits, &ofdm)?, bits.len(), &ofdm)?;
            Ok(format!("ber={}", bit_error_rate(&bits, &back)))
        })(),
        |d| d == "ber=0",
    );

    push(
        "precoding invariance",
        (|| {
            let x = KeyExchangeConfig::default();
            let modes = x.mode_set()?;
            let dict = Dictionary::from_modes(&modes, &[0, 1, 2, 3])?;
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut good = 0;
            let draws = 50;
            for _ in 0..draws {
                let truth = sample_multipath_profile(&mut rng, 360, 2, 60.0, 0.6)?;
                let meas = CsiMeasurementSet::new(
                    (0..4)
                        .map(|m| Ok((m, crate::channel::csi_from_aod(&truth, modes.pattern(m))?)))
                        .collect::<Result<_>>()?,
                )?;
                let est = estimate_aod(&meas, &dict, SolverKind::default(), 2, 1e-9)?;
                let pre = compute_precoder(&predict_all(&est.profile, &modes)?, 10.0)?;
                let h4 = crate::channel::csi_from_aod(&truth, modes.pattern(4))?;
                if !pre.is_usable(4) || (h4 * pre.weight(4) - Cx::new(1.0, 0.0)).norm() < 1e-6 {
                    good += 1;
                }
            }
            Ok(format!("{good}/{draws}"))
        })(),
        |d| {
            let (a, b) = d.split_once('/').unwrap_or(("0", "1"));
            a.parse::<f64>().unwrap_or(0.0) >= 0.9 * b.parse::<f64>().unwrap_or(1.0)
        },
    );

    let tiny = ScenarioConfig {
        trials: 4,
        seed: 11,
        ..ScenarioConfig::default()
    };
    push(
        "determinism",
        (|| {
            let a = run_scenario(&tiny)?;
            let b = run_scenario(&tiny)?;
            Ok(if a == b { "identical".into() } else { "differs".into() })
        })(),
        |d| d == "identical",
    );

    push(
        "transcript round trip",
        (|| {
            let (_, t) = run_trial(&tiny, 0)?;
            let t = t.ok_or_else(|| Error::Aborted("trial aborted".into()))?;
            let text = t.to_json()?;
            let back = Transcript::from_json(&text)?;
            back.check_consistency()?;
            Ok(if back.to_json()? == text {
                "stable".into()
            } else {
                "changed".into()
            })
        })(),
        |d| d == "stable",
    );

    push(
        "complementary jamming",
        (|| {
            let (_, t) = run_trial(&tiny, 1)?;
            let t = t.ok_or_else(|| Error::Aborted("trial aborted".into()))?;
            let bad = t
                .frames
                .iter()
                .flat_map(|f| (0..f.jam.frame_len()).map(move |i| (f, i)))
                .filter(|(f, i)| (0..f.jam.n_copies()).filter(|&c| f.jam.is_jammed(c, *i)).count() != 1)
                .count();
            Ok(format!("violations={bad}"))
        })(),
        |d| d == "violations=0",
    );

    push(
        "divergence properties",
        (|| {
            let same = crate::adversary::divergence(&[Cx::new(0.3, -0.2); 3])?;
            let pair = crate::adversary::divergence(&[Cx::new(1.0, 0.0), Cx::new(0.0, 0.0)])?;
            let ok = same.abs() < 1e-15 && (pair - 0.25).abs() < 1e-15;
            Ok(format!(
                "same={same:.3e} pair={pair}{}",
                if ok { "" } else { " mismatch" }
            ))
        })(),
        |d| !d.ends_with("mismatch"),
    );

    checks
}
