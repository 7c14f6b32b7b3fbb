//! Command-line verbs. Each returns a [`CliError`] whose exit code the binary
//! passes through; the library functions are also used directly by tests.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use mhpo_core::trainer::{RunResult, Trainer};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::lab::{
    AdvantageDistribution, CertReport, Lab, RatioDistribution, StressReport, StressSpec, Suite,
};
use crate::report;
use crate::runfiles::{self, EvalPoint, Summary};

/// Environment variable naming the default output root.
pub const OUT_ROOT_VAR: &str = "MHPO_OUT";
/// Output root when [`OUT_ROOT_VAR`] is unset.
pub const DEFAULT_OUT_ROOT: &str = "runs";

/// Certification report file names.
pub const CERT_JSON: &str = "cert.json";
/// Human-readable certification report.
pub const CERT_TXT: &str = "cert.txt";

#[derive(Debug, Parser)]
#[command(
    name = "mhpo",
    version,
    about = "Smooth ratio-modulated policy optimization on toy tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one run. Any config field can be overridden with --section.key VALUE.
    Train {
        /// TOML run configuration; defaults are used for anything missing.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory [default: $MHPO_OUT/<label>-seed<seed>].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Shorthand for --train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a certification suite; exits 2 if any assertion fails.
    Verify {
        /// Suite to run.
        #[arg(value_enum, default_value = "all")]
        suite: Suite,
        /// Report directory [default: $MHPO_OUT/verify-<suite>].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed of the randomized checks.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Charts and best-vs-latest table over run directories.
    Report {
        /// Run directories to include.
        runs: Vec<PathBuf>,
        /// Output directory [default: $MHPO_OUT/report].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare objectives under a synthetic ratio distribution.
    Stress {
        /// Ratio law.
        #[arg(long, value_enum, default_value = "lognormal")]
        ratios: RatioKind,
        /// Mean of ln r (lognormal).
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        mu: f64,
        /// Standard deviation of ln r (lognormal).
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        /// Tail index (pareto-tail).
        #[arg(long, default_value_t = 1.5)]
        alpha: f64,
        /// Tail probability (pareto-tail).
        #[arg(long, default_value_t = 0.05)]
        mix: f64,
        /// Advantage law.
        #[arg(long, value_enum, default_value = "rademacher")]
        advantages: AdvKind,
        /// Number of draws (at least 10000).
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        /// RNG seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory [default: $MHPO_OUT/stress].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RatioKind {
    Lognormal,
    ParetoTail,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AdvKind {
    Rademacher,
    Normal,
}

/// Dotted `(section.key, value)` pairs.
pub type Overrides = Vec<(String, String)>;

/// Splits `--section.key VALUE` and `--section.key=VALUE` out of `args`.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), CliError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| CliError::Validation(format!("{name}: missing value")))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Run directory written.
    pub dir: PathBuf,
    /// Resolved configuration.
    pub config: RunConfig,
    /// Trainer output.
    pub result: RunResult,
    /// Summary written to `summary.json`.
    pub summary: Summary,
}

/// Resolves `config`, trains and writes the run directory `out` (or the
/// default under the output root).
pub fn train(config: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome, CliError> {
    let resolved = config.resolve()?;
    let cfg = resolved.train_config()?;
    let label = resolved.label();
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out_root().join(format!("{label}-seed{}", cfg.seed)));
    create_dir(&dir)?;
    runfiles::write(&dir, runfiles::CONFIG_FILE, resolved.to_toml())?;

    let trainer = Trainer::new(cfg.clone()).map_err(|e| CliError::Validation(e.to_string()))?;
    let result = trainer
        .run()
        .map_err(|e| CliError::Validation(e.to_string()))?;

    runfiles::write(&dir, runfiles::LOG_FILE, runfiles::log_csv(&result.log)?)?;
    runfiles::write(
        &dir,
        runfiles::BEST_FILE,
        runfiles::checkpoint_text(&result.best),
    )?;
    runfiles::write(
        &dir,
        runfiles::LATEST_FILE,
        runfiles::checkpoint_text(&result.latest),
    )?;
    runfiles::write(
        &dir,
        runfiles::INCIDENTS_FILE,
        runfiles::incidents_text(&result.incidents),
    )?;
    let summary = Summary {
        label,
        method: cfg.method.name().into(),
        env: resolved.env.kind.clone().unwrap_or_default(),
        seed: cfg.seed,
        steps: result.latest.step,
        best: EvalPoint {
            step: result.best.step,
            eval_success: result.best.eval_success,
        },
        latest: EvalPoint {
            step: result.latest.step,
            eval_success: result.latest.eval_success,
        },
        delta: result.delta(),
        incidents: result.incidents.len(),
        malformed_responses: result.log.iter().map(|r| r.malformed).sum(),
        assumptions: runfiles::run_assumptions(cfg.degeneracy_tol, cfg.updates_per_rollout),
    };
    runfiles::write(
        &dir,
        runfiles::SUMMARY_FILE,
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(TrainOutcome {
        dir,
        config: resolved,
        result,
        summary,
    })
}

fn write_stress(dir: &Path, stem: &str, rep: &StressReport) -> Result<(), CliError> {
    let (summary, hist) = rep.to_csv()?;
    runfiles::write(dir, &format!("{stem}_summary.csv"), summary)?;
    runfiles::write(dir, &format!("{stem}_hist.csv"), hist)
}

fn finish(report: &CertReport, dir: &Path) -> Result<CertReport, CliError> {
    runfiles::write(dir, CERT_JSON, report.to_json())?;
    runfiles::write(dir, CERT_TXT, report.to_text())?;
    if report.passed {
        Ok(report.clone())
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.ok())
            .map(|c| c.name.as_str())
            .collect();
        Err(CliError::CheckFailed(failed.join(", ")))
    }
}

/// Runs `suite` with `lab` and writes `cert.json`, `cert.txt` and any stress
/// tables into `out`. A failed assertion yields [`CliError::CheckFailed`]
/// after the reports are written.
pub fn verify(lab: &Lab, suite: Suite, out: &Path) -> Result<CertReport, CliError> {
    create_dir(out)?;
    let output = lab.run_suite(suite)?;
    for (i, rep) in output.stress.iter().enumerate() {
        write_stress(out, &format!("stress_{i}"), rep)?;
    }
    finish(&output.report, out)
}

/// Runs one stress comparison and writes its tables and checks into `out`.
pub fn stress(lab: &Lab, spec: &StressSpec, out: &Path) -> Result<CertReport, CliError> {
    let rep = lab.stress_compare(spec)?;
    create_dir(out)?;
    write_stress(out, "stress", &rep)?;
    finish(&lab.stress_checks(&rep), out)
}

/// Reads run directories and writes charts and tables into `out`. Unreadable
/// runs are skipped and reported in the returned warnings.
pub fn report_runs(runs: &[PathBuf], out: &Path) -> Result<(Vec<PathBuf>, Vec<String>), CliError> {
    if runs.is_empty() {
        return Err(CliError::Validation(
            "report: at least one run directory is required".into(),
        ));
    }
    let (data, warnings) = report::load_runs(runs);
    create_dir(out)?;
    Ok((report::write_report(&data, out)?, warnings))
}

/// Parses `args` (without the program name) and runs the command.
pub fn run(args: Vec<String>) -> Result<(), CliError> {
    let (rest, overrides) = split_overrides(args)?;
    let cli = match Cli::try_parse_from(std::iter::once("mhpo".to_string()).chain(rest)) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            return Err(CliError::Validation(
                e.render().to_string().trim_end().to_string(),
            ))
        }
    };
    if !overrides.is_empty() && !matches!(cli.command, Command::Train { .. }) {
        return Err(CliError::Validation(format!(
            "--{}: overrides apply to train only",
            overrides[0].0
        )));
    }
    match cli.command {
        Command::Train { config, out, seed } => {
            let mut overrides = overrides;
            if let Some(s) = seed {
                overrides.push(("train.seed".into(), s.to_string()));
            }
            let cfg = match config {
                Some(path) => RunConfig::load(&path, &overrides)?,
                None => RunConfig::parse_with_overrides("", &overrides)?,
            };
            let o = train(&cfg, out.as_deref())?;
            println!(
                "{}: best {:.4} at step {}, latest {:.4}, delta {:+.4}, incidents {} -> {}",
                o.summary.label,
                o.summary.best.eval_success,
                o.summary.best.step,
                o.summary.latest.eval_success,
                o.summary.delta,
                o.summary.incidents,
                o.dir.display()
            );
            Ok(())
        }
        Command::Verify { suite, out, seed } => {
            let dir = out.unwrap_or_else(|| out_root().join(format!("verify-{}", suite.name())));
            let result = verify(&Lab::new(seed), suite, &dir);
            if let Ok(text) = std::fs::read_to_string(dir.join(CERT_TXT)) {
                print!("{text}");
            }
            result.map(|_| ())
        }
        Command::Report { runs, out } => {
            let dir = out.unwrap_or_else(|| out_root().join("report"));
            let (paths, warnings) = report_runs(&runs, &dir)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            for p in paths {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Stress {
            ratios,
            mu,
            sigma,
            alpha,
            mix,
            advantages,
            samples,
            seed,
            out,
        } => {
            let ratios = match ratios {
                RatioKind::Lognormal => RatioDistribution::Lognormal { mu, sigma },
                RatioKind::ParetoTail => RatioDistribution::ParetoTail { alpha, mix },
            };
            let advantages = match advantages {
                AdvKind::Rademacher => AdvantageDistribution::Rademacher,
                AdvKind::Normal => AdvantageDistribution::StandardNormal,
            };
            let spec = StressSpec::new(ratios, advantages, samples, seed);
            let dir = out.unwrap_or_else(|| out_root().join("stress"));
            let result = stress(&Lab::new(seed), &spec, &dir);
            if let Ok(text) = std::fs::read_to_string(dir.join(CERT_TXT)) {
                print!("{text}");
            }
            result.map(|_| ())
        }
    }
}

/// Entry point of the binary: runs and maps the outcome to an exit code.
pub fn main_with_args(args: impl IntoIterator<Item = OsString>) -> i32 {
    let args: Vec<String> = args
        .into_iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match run(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_out() {
        let (rest, ov) = split_overrides(s(&[
            "train",
            "--method.c",
            "2.0",
            "--seed",
            "7",
            "--train.learning_rate=0.1",
        ]))
        .unwrap();
        assert_eq!(rest, s(&["train", "--seed", "7"]));
        assert_eq!(
            ov,
            vec![
                ("method.c".into(), "2.0".into()),
                ("train.learning_rate".into(), "0.1".into())
            ]
        );
        assert!(split_overrides(s(&["train", "--method.c"])).is_err());
    }

    #[test]
    fn usage_errors_are_validation_errors() {
        assert_eq!(run(s(&["report"])).unwrap_err().exit_code(), 1);
        assert_eq!(run(s(&["frobnicate"])).unwrap_err().exit_code(), 1);
        assert_eq!(
            run(s(&["verify", "--method.c", "2"]))
                .unwrap_err()
                .exit_code(),
            1
        );
        assert!(run(s(&["--help"])).is_ok());
    }
}
