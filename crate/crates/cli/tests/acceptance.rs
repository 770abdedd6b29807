//! Acceptance gate. One PASS/FAIL line per criterion; exits non-zero if any
//! criterion fails. Scenario criteria go through the `ijam` binary.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ijam::channel::{csi_from_aod, sample_multipath_profile, AodProfile, LpdaShape, ModeSet};
use ijam::csaod::{compute_precoder, estimate_aod, predict_all, CsiMeasurementSet, Dictionary, SolverKind};
use ijam::phy::{bit_error_rate, demodulate_bits, modulate_bits, Cx, OfdmConfig};
use ijam::protocol::{generate_key, KeyExchangeConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const SEED: &str = "1";
const TRIALS: &str = "200";

struct Gate {
    failed: usize,
}

impl Gate {
    fn report(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} {id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn ijam(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ijam"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "ijam {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn scenario(dir: &Path, name: &str, extra: &[&str]) -> Result<Value, String> {
    let out = dir.join(name);
    let out = out.to_str().unwrap();
    let mut args = vec![
        "run",
        "--seed",
        SEED,
        "--trials",
        TRIALS,
        "--snr-db",
        "25",
        "--jam-to-signal-db",
        "0",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    ijam(&args)?;
    let text = std::fs::read_to_string(dir.join(name).join("summary.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn mean(summary: &Value, metric: &str) -> f64 {
    summary["metrics"][metric]["mean"].as_f64().unwrap_or(f64::NAN)
}

fn modem_integrity(gate: &mut Gate) {
    let ofdm = OfdmConfig::default();
    let bits = generate_key(&mut ChaCha8Rng::seed_from_u64(101), 100_000);
    let ber = modulate_bits(&bits, &ofdm)
        .and_then(|f| demodulate_bits(&f, bits.len(), &ofdm))
        .map(|back| bit_error_rate(&bits, &back));
    match ber {
        Ok(b) => gate.report(1, "modem integrity", b == 0.0, format!("BER {b} over 1e5 bits")),
        Err(e) => gate.report(1, "modem integrity", false, e.to_string()),
    }
}

/// Best two-atom fit over every pair of bins, each solved through its 2x2
/// normal equations; returns the prediction for `held_out`.
fn exhaustive_pair_prediction(modes: &ModeSet, train: &[usize], y: &[Cx], held_out: usize) -> Cx {
    let n = modes.n_bins();
    let g = |m: usize, b: usize| modes.pattern(m).gain[b];
    let mut best = (f64::INFINITY, Cx::default());
    for i in 0..n {
        for j in i + 1..n {
            let (mut g11, mut g12, mut g22) = (Cx::default(), Cx::default(), Cx::default());
            let (mut b1, mut b2) = (Cx::default(), Cx::default());
            for (r, &m) in train.iter().enumerate() {
                let (a1, a2) = (g(m, i), g(m, j));
                g11 += a1.conj() * a1;
                g12 += a1.conj() * a2;
                g22 += a2.conj() * a2;
                b1 += a1.conj() * y[r];
                b2 += a2.conj() * y[r];
            }
            let det = g11 * g22 - g12 * g12.conj();
            if det.norm() < 1e-12 {
                continue;
            }
            let c1 = (g22 * b1 - g12 * b2) / det;
            let c2 = (g11 * b2 - g12.conj() * b1) / det;
            let resid: f64 = train
                .iter()
                .enumerate()
                .map(|(r, &m)| (y[r] - c1 * g(m, i) - c2 * g(m, j)).norm_sqr())
                .sum();
            if resid < best.0 {
                best = (resid, c1 * g(held_out, i) + c2 * g(held_out, j));
            }
        }
    }
    best.1
}

fn solver_prediction(
    modes: &ModeSet,
    train: &[usize],
    truth: &AodProfile,
    solver: SolverKind,
) -> ijam::Result<Vec<Cx>> {
    let dict = Dictionary::from_modes(modes, train)?;
    let meas = CsiMeasurementSet::new(
        train
            .iter()
            .map(|&m| Ok((m, csi_from_aod(truth, modes.pattern(m))?)))
            .collect::<ijam::Result<_>>()?,
    )?;
    let est = estimate_aod(&meas, &dict, solver, 2, 1e-6)?;
    predict_all(&est.profile, modes)
}

fn precoding_invariance(gate: &mut Gate) {
    let draws = 500;
    let train = [0, 1, 2, 3];
    let run = || -> ijam::Result<String> {
        let x = KeyExchangeConfig::default();
        let modes = x.mode_set()?;
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let (mut exact, mut deep_fade) = (0, 0);
        for _ in 0..draws {
            let truth = sample_multipath_profile(&mut rng, x.n_bins, 2, 60.0, 0.6)?;
            let pre = compute_precoder(&solver_prediction(&modes, &train, &truth, x.solver)?, x.power_clamp)?;
            let h = csi_from_aod(&truth, modes.pattern(4))?;
            if pre.is_usable(4) && (h * pre.weight(4) - Cx::new(1.0, 0.0)).norm() < 1e-6 {
                exact += 1;
            } else if !pre.is_usable(4) && h.norm() * x.power_clamp < 1.0 {
                // Clamped because the true channel is too weak to invert.
                deep_fade += 1;
            }
        }

        let coarse = ModeSet::from_shape(&LpdaShape::default(), 5, 72)?;
        let mut rng = ChaCha8Rng::seed_from_u64(203);
        let (mut within, mut omp_within) = (0, 0);
        for _ in 0..draws {
            let truth = sample_multipath_profile(&mut rng, 72, 2, 60.0, 0.6)?;
            let y: Vec<Cx> = train
                .iter()
                .map(|&m| csi_from_aod(&truth, coarse.pattern(m)))
                .collect::<ijam::Result<_>>()?;
            let h = csi_from_aod(&truth, coarse.pattern(4))?;
            let oracle_err = (exhaustive_pair_prediction(&coarse, &train, &y, 4) - h).norm();
            let bound = (2.0 * oracle_err).max(1e-9);
            if (solver_prediction(&coarse, &train, &truth, x.solver)?[4] - h).norm() <= bound {
                within += 1;
            }
            if (solver_prediction(&coarse, &train, &truth, SolverKind::Omp)?[4] - h).norm() <= bound {
                omp_within += 1;
            }
        }
        let ok = (exact + deep_fade) * 10 >= draws * 9 && within * 10 >= draws * 9;
        Ok(format!(
            "{}|exact precoding {exact}/{draws} plus {deep_fade} correctly clamped deep fades, \
             default solver within 2x oracle {within}/{draws} (plain OMP {omp_within}/{draws}, informational)",
            if ok { "ok" } else { "no" }
        ))
    };
    match run() {
        Ok(s) => {
            let (flag, detail) = s.split_once('|').unwrap();
            gate.report(2, "precoding invariance", flag == "ok", detail.to_string());
        }
        Err(e) => gate.report(2, "precoding invariance", false, e.to_string()),
    }
}

type Pair = Result<(Value, Value), String>;

fn on_off_runs(dir: &Path) -> Pair {
    let on = scenario(dir, "on", &["--randomize", "--eve-antennas", "2"])?;
    let off = scenario(dir, "off", &["--no-randomize", "--eve-antennas", "2"])?;
    Ok((on, off))
}

fn bob_invariance(gate: &mut Gate, runs: &Pair) {
    match runs {
        Ok((on, off)) => {
            let (bon, boff) = (mean(on, "bob_ber"), mean(off, "bob_ber"));
            gate.report(
                3,
                "bob invariance",
                bon < 1e-3 && (bon - boff).abs() < 0.01,
                format!("bob_ber ON {bon:.2e}, OFF {boff:.2e}"),
            );
        }
        Err(e) => gate.report(3, "bob invariance", false, e.clone()),
    }
}

fn attack_baseline(gate: &mut Gate, runs: &Pair) {
    match runs {
        Ok((_, off)) => {
            let (ber, acc) = (mean(off, "eve_ber"), mean(off, "eve_classification_accuracy"));
            gate.report(
                4,
                "attack baseline",
                ber < 0.05 && acc > 0.95,
                format!("randomization OFF: eve_ber {ber:.4}, classification accuracy {acc:.4}"),
            );
        }
        Err(e) => gate.report(4, "attack baseline", false, e.clone()),
    }
}

fn entropy_mechanism(gate: &mut Gate, runs: &Pair) {
    match runs {
        Ok((on, off)) => {
            let (hon, hoff) = (
                mean(on, "eve_channel_entropy_bits"),
                mean(off, "eve_channel_entropy_bits"),
            );
            gate.report(
                6,
                "entropy mechanism",
                hon - hoff >= 1.0,
                format!("entropy ON {hon:.3} bits, OFF {hoff:.3} bits, gain {:.3}", hon - hoff),
            );
        }
        Err(e) => gate.report(6, "entropy mechanism", false, e.clone()),
    }
}

fn defense_claim(gate: &mut Gate, dir: &Path) {
    let start = Instant::now();
    let out = dir.join("sweep");
    let args = [
        "sweep",
        "--axis",
        "eve_antennas",
        "--values",
        "1,2,4",
        "--seed",
        SEED,
        "--trials",
        TRIALS,
        "--snr-db",
        "25",
        "--jam-to-signal-db",
        "0",
        "--randomize",
        "--out",
        out.to_str().unwrap(),
    ];
    let rows = ijam(&args).and_then(|_| {
        let text = std::fs::read_to_string(out.join("sweep.json")).map_err(|e| e.to_string())?;
        serde_json::from_str::<Value>(&text).map_err(|e| e.to_string())
    });
    let elapsed = start.elapsed().as_secs_f64();
    match rows {
        Ok(Value::Array(rows)) => {
            let bers: Vec<(i64, f64)> = rows
                .iter()
                .map(|r| (r["value"].as_i64().unwrap_or(-1), mean(&r["summary"], "eve_ber")))
                .collect();
            let lo = bers.iter().map(|b| b.1).fold(f64::INFINITY, f64::min);
            let hi = bers.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
            let in_band = bers.iter().all(|&(_, b)| (0.45..=0.55).contains(&b));
            let listed: Vec<String> = bers.iter().map(|(n, b)| format!("{n} antennas {b:.4}")).collect();
            gate.report(
                5,
                "defense claim",
                bers.len() == 3 && in_band && hi - lo < 0.03 && elapsed <= 600.0,
                format!("eve_ber {}; spread {:.4}; {elapsed:.1} s", listed.join(", "), hi - lo),
            );
        }
        Ok(other) => gate.report(5, "defense claim", false, format!("unexpected sweep output {other}")),
        Err(e) => gate.report(5, "defense claim", false, e),
    }
}

fn determinism(gate: &mut Gate, dir: &Path) {
    let rows = |name: &str| -> Result<Vec<String>, String> {
        let out = dir.join(name);
        ijam(&[
            "run",
            "--seed",
            SEED,
            "--trials",
            TRIALS,
            "--out",
            out.to_str().unwrap(),
        ])?;
        let text = std::fs::read_to_string(out.join("results.csv")).map_err(|e| e.to_string())?;
        Ok(text.lines().skip(1).map(str::to_string).collect())
    };
    match (rows("det_a"), rows("det_b")) {
        (Ok(a), Ok(b)) => gate.report(
            7,
            "determinism",
            a == b && !a.is_empty(),
            format!("{} data rows, identical: {}", a.len(), a == b),
        ),
        (a, b) => gate.report(7, "determinism", false, a.err().or(b.err()).unwrap()),
    }
}

fn oracle_eve(gate: &mut Gate, dir: &Path) {
    match scenario(
        dir,
        "oracle",
        &[
            "--randomize",
            "--eve-antennas",
            "2",
            "--eve-strategy",
            "oracle-equalized",
        ],
    ) {
        Ok(s) => {
            let ber = mean(&s, "eve_ber");
            gate.report(
                8,
                "oracle eve",
                ber < 0.05,
                format!("randomization ON, oracle eve_ber {ber:.4}"),
            )
        }
        Err(e) => gate.report(8, "oracle eve", false, e),
    }
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let mut gate = Gate { failed: 0 };
    modem_integrity(&mut gate);
    precoding_invariance(&mut gate);
    let runs = on_off_runs(dir.path());
    bob_invariance(&mut gate, &runs);
    attack_baseline(&mut gate, &runs);
    defense_claim(&mut gate, dir.path());
    entropy_mechanism(&mut gate, &runs);
    determinism(&mut gate, dir.path());
    oracle_eve(&mut gate, dir.path());
    if gate.failed > 0 {
        println!("{} criterion(s) failed", gate.failed);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
