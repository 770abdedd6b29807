use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ijam::adversary::{evaluate_attack, eve_attack, EveConfig, EveStrategy, EveView};
use ijam::harness::{self, ScenarioConfig};
use ijam::protocol::Transcript;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

#[derive(Parser)]
#[command(name = "ijam", version, about = "Channel-randomized iJam key exchange simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write results.csv and summary.json.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write transcript.json for this trial (default 0).
        #[arg(long, value_name = "TRIAL", num_args = 0..=1, default_missing_value = "0")]
        transcript: Option<usize>,
    },
    /// Run the scenario once per value of one config field.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Config field to vary, dotted for nested fields.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, each parsed as JSON or else taken as text.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Re-run an eavesdropper strategy against a saved transcript.
    Replay {
        transcript: PathBuf,
        #[arg(long, default_value = "divergence")]
        strategy: EveStrategy,
        /// Use only Eve's first N antennas.
        #[arg(long)]
        eve_antennas: Option<usize>,
        /// Seed for strategies that draw random bits.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args)]
struct ScenarioArgs {
    /// JSON scenario config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    snr_db: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    jam_to_signal_db: Option<f64>,
    #[arg(long, overrides_with = "no_randomize")]
    randomize: bool,
    #[arg(long, overrides_with = "randomize")]
    no_randomize: bool,
    #[arg(long)]
    eve_antennas: Option<usize>,
    #[arg(long)]
    eve_strategy: Option<EveStrategy>,
    #[arg(long)]
    key_bits: Option<usize>,
    #[arg(long)]
    n_modes: Option<usize>,
    #[arg(long)]
    n_frames: Option<usize>,
    #[arg(long)]
    n_paths: Option<usize>,
    #[arg(long)]
    rpm: Option<f64>,
}

impl ScenarioArgs {
    fn resolve(&self) -> Result<ScenarioConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))
                    .map_err(Failure::Config)?;
                ScenarioConfig::from_json(&text).map_err(Failure::from)?
            }
            None => ScenarioConfig::default(),
        };
        let x = &mut cfg.exchange;
        macro_rules! set {
            ($($flag:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag { $target = v; })*
            };
        }
        set!(
            seed => cfg.seed,
            trials => cfg.trials,
            eve_antennas => cfg.eve_antennas,
            eve_strategy => cfg.eve_strategy,
            n_paths => cfg.n_paths,
            snr_db => x.snr_db,
            jam_to_signal_db => x.jam_to_signal_db,
            key_bits => x.key_bits,
            n_modes => x.n_modes,
            n_frames => x.n_frames,
            rpm => x.rpm,
        );
        if self.randomize {
            x.randomization_on = true;
        }
        if self.no_randomize {
            x.randomization_on = false;
        }
        cfg.validate().map_err(Failure::from)?;
        Ok(cfg)
    }
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ijam::Error> for Failure {
    fn from(e: ijam::Error) -> Self {
        match e {
            ijam::Error::InvalidInput(_) | ijam::Error::Json(_) => Failure::Config(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn prepare_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::Runtime)
}

fn run(scenario: &ScenarioArgs, out: &Path, transcript: Option<usize>) -> Result<(), Failure> {
    let cfg = scenario.resolve()?;
    prepare_dir(out)?;
    let records = harness::run_scenario(&cfg).map_err(runtime)?;
    harness::write_results_csv(&out.join("results.csv"), &records).map_err(runtime)?;
    let summary = harness::summarize(&cfg, &records);
    harness::write_json(&out.join("summary.json"), &summary).map_err(runtime)?;
    if let Some(trial) = transcript {
        match harness::run_trial(&cfg, trial).map_err(runtime)? {
            (_, Some(t)) => {
                std::fs::write(out.join("transcript.json"), t.to_json().map_err(runtime)?).map_err(runtime)?
            }
            (_, None) => log::warn!("trial {trial} aborted; no transcript written"),
        }
    }
    let show = |name: &str| summary.mean(name).map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} trials ({} aborted): bob_ber={} eve_ber={} eve_accuracy={} entropy={} bits",
        summary.trials,
        summary.aborted,
        show("bob_ber"),
        show("eve_ber"),
        show("eve_classification_accuracy"),
        show("eve_channel_entropy_bits"),
    );
    Ok(())
}

fn sweep(scenario: &ScenarioArgs, axis: &str, values: &[String], out: &Path) -> Result<(), Failure> {
    let base = scenario.resolve()?;
    let values: Vec<Value> = values
        .iter()
        .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone())))
        .collect();
    // Validate every point before spending time on any of them.
    for v in &values {
        base.with_field(axis, v)?.validate()?;
    }
    prepare_dir(out)?;
    let rows = harness::sweep(&base, axis, &values).map_err(runtime)?;
    harness::write_sweep_csv(&out.join("sweep.csv"), &rows).map_err(runtime)?;
    harness::write_json(&out.join("sweep.json"), &rows).map_err(runtime)?;
    for row in &rows {
        let show = |name: &str| row.summary.mean(name).map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!(
            "{axis}={}: bob_ber={} eve_ber={} eve_accuracy={}",
            row.value,
            show("bob_ber"),
            show("eve_ber"),
            show("eve_classification_accuracy"),
        );
    }
    Ok(())
}

fn replay(
    path: &Path,
    strategy: EveStrategy,
    antennas: Option<usize>,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Config)?;
    let t = Transcript::from_json(&text)?;
    t.check_consistency()?;
    let mut view = if strategy == EveStrategy::OracleEqualized {
        EveView::with_oracle(&t)?
    } else {
        EveView::from_transcript(&t)
    };
    if let Some(n) = antennas {
        view = view.restrict_antennas(n)?;
    }
    let cfg = EveConfig {
        n_antennas: view.n_antennas(),
        strategy,
    };
    cfg.validate()?;
    let outcome = eve_attack(&view, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(runtime)?;
    let report = evaluate_attack(&t, &outcome).map_err(runtime)?;
    match out {
        Some(p) => harness::write_json(p, &report).map_err(runtime)?,
        None => {
            let text = serde_json::to_string_pretty(&report).map_err(runtime)?;
            // A closed pipe on stdout is not a failure of the replay.
            let _ = writeln!(std::io::stdout(), "{text}");
        }
    }
    Ok(())
}

fn selftest() -> Result<(), Failure> {
    let checks = harness::selftest();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Runtime(anyhow::anyhow!("{failed} self-test check(s) failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run {
            scenario,
            out,
            transcript,
        } => run(scenario, out, *transcript),
        Command::Sweep {
            scenario,
            axis,
            values,
            out,
        } => sweep(scenario, axis, values, out),
        Command::Replay {
            transcript,
            strategy,
            eve_antennas,
            seed,
            out,
        } => replay(transcript, *strategy, *eve_antennas, *seed, out.as_deref()),
        Command::Selftest => selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
