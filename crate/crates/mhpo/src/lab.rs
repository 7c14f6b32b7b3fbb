//! Certification suite: grid bound checks, finite-difference oracles, Monte
//! Carlo second-moment checks and a heavy-tailed ratio stress simulator.
//!
//! Every check records what it measured, the bound it was compared with, the
//! tolerance and the invariant it certifies. Assertion-class checks decide
//! whether a suite passes; report-class checks carry comparisons that are
//! informative but not pass/fail.
//!
//! All checks take the multiplier bound from the [`Lab`], so a deliberately
//! wrong bound can be injected to exercise the failure path.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use mhpo_core::env::{EnvKind, EnvSpec};
use mhpo_core::objective::MethodConfig;
use mhpo_core::policy::{ContextKey, PolicyParams, PolicyShape};
use mhpo_core::ratio::{self, DhpParams, LfmParams};
use mhpo_core::rollout::{self, RolloutSeed};
use mhpo_core::stats;
use mhpo_core::trainer::{surrogate, Batch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto, StandardNormal};
use serde::Serialize;

use crate::error::CliError;

/// Points in the log-spaced bound grid.
pub const BOUND_GRID_POINTS: usize = 100_000;
/// Grid range `[1e-6, 1e6]`.
pub const BOUND_GRID_RANGE: (f64, f64) = (1e-6, 1e6);
/// Absolute slack for "grid maximum ≤ closed form".
pub const BOUND_TOL: f64 = 1e-9;
/// Relative agreement between grid maximum and closed form.
pub const BOUND_MATCH_REL: f64 = 1e-4;
/// Smoothing bounds certified by default.
pub const C_GRID: [f64; 4] = [0.5, 1.0, 1.5, 2.0];
/// Relative tolerance of the derivative oracle.
pub const DERIVATIVE_REL_TOL: f64 = 1e-6;
/// Relative tolerance of the semi-gradient oracle.
pub const SEMI_GRADIENT_REL_TOL: f64 = 1e-5;
/// Denominator floor of the semi-gradient relative error.
pub const SEMI_GRADIENT_ABS_FLOOR: f64 = 1e-9;
/// Minimum Monte Carlo sample for distributional reports.
pub const MIN_SAMPLES: usize = 10_000;
/// Vocabulary of the random score vectors in the moment check.
const SCORE_VOCAB: usize = 4;
/// Tokens per mini-batch in the batch-level moment report.
const MOMENT_BATCH: usize = 64;

/// Whether a check decides the suite outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckClass {
    /// Failing it fails the suite.
    Assert,
    /// Reported only.
    Report,
}

/// Outcome of one check.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    /// Short identifier.
    pub name: String,
    /// The invariant the check certifies.
    pub certifies: String,
    /// Assertion or report.
    pub class: CheckClass,
    /// `None` for report-class checks.
    pub passed: Option<bool>,
    /// Measured quantity.
    pub measured: f64,
    /// Bound or reference value it is compared with.
    pub bound: f64,
    /// Tolerance of the comparison.
    pub tolerance: f64,
    /// Free-form detail.
    pub note: String,
    /// Wall time; excluded from JSON so reports are reproducible byte for byte.
    #[serde(skip)]
    pub runtime: Duration,
}

impl Check {
    fn assert(
        name: impl Into<String>,
        certifies: &str,
        passed: bool,
        measured: f64,
        bound: f64,
        tolerance: f64,
    ) -> Self {
        Check {
            name: name.into(),
            certifies: certifies.into(),
            class: CheckClass::Assert,
            passed: Some(passed),
            measured,
            bound,
            tolerance,
            note: String::new(),
            runtime: Duration::ZERO,
        }
    }

    fn report(name: impl Into<String>, certifies: &str, measured: f64, bound: f64) -> Self {
        Check {
            class: CheckClass::Report,
            passed: None,
            ..Check::assert(name, certifies, true, measured, bound, 0.0)
        }
    }

    fn note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    fn timed(mut self, since: Instant) -> Self {
        self.runtime = since.elapsed();
        self
    }

    /// False only for a failed assertion.
    pub fn ok(&self) -> bool {
        self.passed != Some(false)
    }
}

/// Checks of one suite.
#[derive(Debug, Clone, Serialize)]
pub struct CertReport {
    /// Suite name.
    pub suite: String,
    /// Seed of the random parts.
    pub seed: u64,
    /// True when every assertion passed.
    pub passed: bool,
    /// Individual checks.
    pub checks: Vec<Check>,
}

impl CertReport {
    fn new(suite: &str, seed: u64, checks: Vec<Check>) -> Self {
        CertReport {
            suite: suite.into(),
            seed,
            passed: checks.iter().all(Check::ok),
            checks,
        }
    }

    /// Concatenates reports under a new suite name.
    pub fn merge(suite: &str, seed: u64, parts: impl IntoIterator<Item = CertReport>) -> Self {
        Self::new(
            suite,
            seed,
            parts.into_iter().flat_map(|r| r.checks).collect(),
        )
    }

    /// Check by name.
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Pretty JSON (runtime omitted).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Human-readable table including runtimes.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "suite {} (seed {}): {}",
            self.suite,
            self.seed,
            if self.passed { "PASS" } else { "FAIL" }
        );
        for c in &self.checks {
            let status = match c.passed {
                Some(true) => "PASS",
                Some(false) => "FAIL",
                None => "info",
            };
            let _ = writeln!(
                s,
                "  [{status}] {:<38} measured {:<14.8e} bound {:<14.8e} tol {:<8.1e} {:>9.3} ms  {}",
                c.name,
                c.measured,
                c.bound,
                c.tolerance,
                c.runtime.as_secs_f64() * 1e3,
                c.certifies
            );
            if !c.note.is_empty() {
                let _ = writeln!(s, "         {}", c.note);
            }
        }
        s
    }
}

/// Distribution of importance ratios in a stress run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RatioDistribution {
    /// `ln r ~ N(mu, sigma²)`.
    Lognormal {
        /// Mean of `ln r`.
        mu: f64,
        /// Standard deviation of `ln r`.
        sigma: f64,
    },
    /// With probability `mix`, `r ~ Pareto(1, alpha)` (an upper tail with
    /// infinite variance for `alpha ≤ 2`); otherwise `ln r ~ N(0, 0.25²)`.
    ParetoTail {
        /// Tail index.
        alpha: f64,
        /// Probability of a tail draw.
        mix: f64,
    },
}

impl RatioDistribution {
    fn validate(&self) -> Result<(), CliError> {
        let ok = match *self {
            RatioDistribution::Lognormal { mu, sigma } => {
                mu.is_finite() && sigma.is_finite() && sigma >= 0.0
            }
            RatioDistribution::ParetoTail { alpha, mix } => {
                alpha > 0.0 && alpha.is_finite() && (0.0..=1.0).contains(&mix)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(CliError::Validation(format!(
                "invalid ratio distribution {self:?}"
            )))
        }
    }

    fn sample_log(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            RatioDistribution::Lognormal { mu, sigma } => {
                mu + sigma * rng.sample::<f64, _>(StandardNormal)
            }
            RatioDistribution::ParetoTail { alpha, mix } => {
                if rng.random::<f64>() < mix {
                    Pareto::new(1.0, alpha).expect("validated").sample(rng).ln()
                } else {
                    0.25 * rng.sample::<f64, _>(StandardNormal)
                }
            }
        }
    }

    /// Short label such as `lognormal(0,3)`.
    pub fn label(&self) -> String {
        match *self {
            RatioDistribution::Lognormal { mu, sigma } => format!("lognormal({mu},{sigma})"),
            RatioDistribution::ParetoTail { alpha, mix } => format!("pareto_tail({alpha},{mix})"),
        }
    }
}

/// Distribution of advantages in a stress run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageDistribution {
    /// `±1` with equal probability.
    Rademacher,
    /// `N(0, 1)`.
    StandardNormal,
}

impl AdvantageDistribution {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            AdvantageDistribution::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            AdvantageDistribution::StandardNormal => rng.sample(StandardNormal),
        }
    }
}

/// A policy-free stress experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct StressSpec {
    /// Ratio law.
    pub ratios: RatioDistribution,
    /// Number of `(r, A)` draws.
    pub n_samples: usize,
    /// Advantage law.
    pub advantages: AdvantageDistribution,
    /// Objectives compared.
    pub transforms: Vec<MethodConfig>,
    /// RNG seed.
    pub seed: u64,
}

impl StressSpec {
    /// The four reference objectives: mhpo (defaults), grpo_clip ε=0.2,
    /// dapo_clip (0.2, 0.28), naive_pg.
    pub fn reference_transforms() -> Vec<MethodConfig> {
        vec![
            MethodConfig::mhpo_default(),
            MethodConfig::GrpoClip { eps: 0.2 },
            MethodConfig::DapoClip {
                eps_low: 0.2,
                eps_high: 0.28,
            },
            MethodConfig::NaivePg,
        ]
    }

    /// Spec with the reference objectives.
    pub fn new(
        ratios: RatioDistribution,
        advantages: AdvantageDistribution,
        n_samples: usize,
        seed: u64,
    ) -> Self {
        StressSpec {
            ratios,
            n_samples,
            advantages,
            transforms: Self::reference_transforms(),
            seed,
        }
    }

    /// Checks the sample size and the distribution parameters.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.n_samples < MIN_SAMPLES {
            return Err(CliError::Validation(format!(
                "n_samples: must be at least {MIN_SAMPLES}, got {}",
                self.n_samples
            )));
        }
        for t in &self.transforms {
            t.validate()
                .map_err(|e| CliError::Validation(e.to_string()))?;
        }
        self.ratios.validate()
    }

    fn draws(&self) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_samples)
            .map(|_| {
                let log_r = self.ratios.sample_log(&mut rng);
                (log_r, self.advantages.sample(&mut rng))
            })
            .collect()
    }
}

/// Label with parameters, e.g. `grpo_clip(eps=0.2)`.
pub fn transform_label(m: &MethodConfig) -> String {
    match *m {
        MethodConfig::Mhpo { lfm, dhp } => format!(
            "mhpo(c={},k+={},l+={},k-={},l-={})",
            lfm.c(),
            dhp.k_pos(),
            dhp.lambda_pos(),
            dhp.k_neg(),
            dhp.lambda_neg()
        ),
        MethodConfig::GrpoClip { eps } => format!("grpo_clip(eps={eps})"),
        MethodConfig::DapoClip { eps_low, eps_high } => {
            format!("dapo_clip(lo={eps_low},hi={eps_high})")
        }
        MethodConfig::NaivePg => "naive_pg".into(),
    }
}

/// Coefficient statistics of one objective under a stress spec.
#[derive(Debug, Clone, Serialize)]
pub struct TransformStats {
    /// [`transform_label`].
    pub label: String,
    /// Objective identifier.
    pub method: String,
    /// Draws.
    pub n: usize,
    /// Fraction of draws whose coefficient is exactly zero.
    pub dead_zone_fraction: f64,
    /// 99.9th percentile of `|coefficient|`.
    pub p999: f64,
    /// Largest `|coefficient|`.
    pub max: f64,
    /// Largest `|coefficient|` over the first tenth of the draws.
    pub max_first_tenth: f64,
    /// Mean `|coefficient|`.
    pub mean: f64,
    /// Closed-form bound on the coefficient, if the objective has one.
    pub bound: Option<f64>,
    /// `(lower edge, upper edge, count)`; the first bin holds exact zeros.
    pub histogram: Vec<(f64, f64, usize)>,
}

/// Result of [`Lab::stress_compare`].
#[derive(Debug, Clone, Serialize)]
pub struct StressReport {
    /// Ratio law label.
    pub ratios: String,
    /// Advantage law.
    pub advantages: AdvantageDistribution,
    /// Seed.
    pub seed: u64,
    /// Per-objective statistics.
    pub transforms: Vec<TransformStats>,
}

const HIST_DECADES: (i32, i32) = (-12, 6);

impl StressReport {
    /// `transform,stat,value` summary plus histogram rows
    /// `transform,bin_lo,bin_hi,count`, as two CSV documents.
    pub fn to_csv(&self) -> Result<(Vec<u8>, Vec<u8>), CliError> {
        let mut summary = csv::Writer::from_writer(Vec::new());
        summary.write_record([
            "transform",
            "n",
            "dead_zone_fraction",
            "p999",
            "max",
            "max_first_tenth",
            "mean",
            "bound",
        ])?;
        let mut hist = csv::Writer::from_writer(Vec::new());
        hist.write_record(["transform", "bin_lo", "bin_hi", "count"])?;
        for t in &self.transforms {
            summary.write_record([
                t.label.clone(),
                t.n.to_string(),
                format!("{:?}", t.dead_zone_fraction),
                format!("{:?}", t.p999),
                format!("{:?}", t.max),
                format!("{:?}", t.max_first_tenth),
                format!("{:?}", t.mean),
                t.bound.map(|b| format!("{b:?}")).unwrap_or_default(),
            ])?;
            for (lo, hi, n) in &t.histogram {
                hist.write_record([
                    t.label.clone(),
                    format!("{lo:?}"),
                    format!("{hi:?}"),
                    n.to_string(),
                ])?;
            }
        }
        let done =
            |w: csv::Writer<Vec<u8>>| w.into_inner().map_err(|e| CliError::Io(e.to_string()));
        Ok((done(summary)?, done(hist)?))
    }

    /// Statistics of the first objective named `method`.
    pub fn get(&self, method: &str) -> Option<&TransformStats> {
        self.transforms.iter().find(|t| t.method == method)
    }
}

fn histogram(coefs: &[f64]) -> Vec<(f64, f64, usize)> {
    let (lo, hi) = HIST_DECADES;
    let mut bins = vec![(0.0, 0.0, 0usize)];
    bins.push((0.0, 10f64.powi(lo), 0));
    for d in lo..hi {
        bins.push((10f64.powi(d), 10f64.powi(d + 1), 0));
    }
    bins.push((10f64.powi(hi), f64::INFINITY, 0));
    for &c in coefs {
        let idx = if c == 0.0 {
            0
        } else if c < 10f64.powi(lo) {
            1
        } else if c >= 10f64.powi(hi) {
            bins.len() - 1
        } else {
            (2 + (c.log10().floor() as i32 - lo) as usize).min(bins.len() - 2)
        };
        bins[idx].2 += 1;
    }
    bins
}

fn log_grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(move |i| a + (b - a) * i as f64 / (n - 1) as f64)
}

/// Derivative of `ψ` computed by central differences of a cancellation-free
/// form: `c·tanh(u)` near the anchor and `±(c - 2c/(e^{2|u|}+1))` once
/// saturated, where only the small complement is differenced.
fn lfm_derivative_oracle(r: f64, c: f64) -> f64 {
    let h = 1e-6 * r;
    let u = r.ln() / c;
    if u.abs() < 1.0 {
        let f = |x: f64| c * (x.ln() / c).tanh();
        (f(r + h) - f(r - h)) / (2.0 * h)
    } else {
        let s = u.signum();
        let g = |x: f64| -s * 2.0 * c / ((2.0 * (x.ln() / c).abs()).exp() + 1.0);
        (g(r + h) - g(r - h)) / (2.0 * h)
    }
}

/// Frozen-penalty loss used by the semi-gradient oracle.
fn frozen_loss(params: &PolicyParams, batch: &Batch, lfm: LfmParams, zeta0: &[f64]) -> f64 {
    let n = batch
        .groups
        .iter()
        .flat_map(|g| &g.responses)
        .filter(|r| r.policy_len() > 0)
        .count() as f64;
    let mut total = 0.0;
    let mut z = zeta0.iter();
    for (g, adv) in batch.groups.iter().zip(&batch.advantages) {
        for (resp, &a) in g.responses.iter().zip(&adv.values) {
            let t = resp.policy_len();
            if t == 0 {
                continue;
            }
            let s: f64 = resp
                .contexts
                .iter()
                .zip(&resp.old_logprobs)
                .zip(resp.policy_tokens())
                .map(|((key, &old), &tok)| {
                    let psi = lfm.c() * ((params.logprob_at(key, tok) - old) / lfm.c()).tanh();
                    (psi - z.next().expect("one penalty per token")).exp() * a
                })
                .sum();
            total += s / t as f64;
        }
    }
    -total / n
}

/// Largest relative disagreement between the implemented gradient and a
/// five-point finite difference of the frozen-penalty loss, over every
/// materialized logit.
fn semi_gradient_error(
    params: &PolicyParams,
    batch: &Batch,
    lfm: LfmParams,
    dhp: DhpParams,
) -> (f64, usize) {
    let analytic = surrogate(params, batch, &MethodConfig::Mhpo { lfm, dhp }).gradient;
    let mut zeta0 = Vec::new();
    for g in &batch.groups {
        for resp in g.responses.iter().filter(|r| r.policy_len() > 0) {
            for ((key, &old), &tok) in resp
                .contexts
                .iter()
                .zip(&resp.old_logprobs)
                .zip(resp.policy_tokens())
            {
                let psi = ratio::lfm_from_log(params.logprob_at(key, tok) - old, lfm);
                zeta0.push(ratio::dhp_penalty(psi, dhp).expect("finite penalty"));
            }
        }
    }
    const H: f64 = 1e-3;
    let keys: Vec<ContextKey> = params.rows().map(|(k, _)| k.clone()).collect();
    let mut worst = 0.0f64;
    let mut count = 0;
    for key in &keys {
        for i in 0..params.shape().vocab_size {
            let at = |d: f64| {
                let mut p = params.clone();
                p.row_mut(key)[i] += d;
                frozen_loss(&p, batch, lfm, &zeta0)
            };
            let numeric = (-at(2.0 * H) + 8.0 * at(H) - 8.0 * at(-H) + at(-2.0 * H)) / (12.0 * H);
            let a = analytic.row(key).map_or(0.0, |r| r[i]);
            worst = worst
                .max((a - numeric).abs() / a.abs().max(numeric.abs()).max(SEMI_GRADIENT_ABS_FLOOR));
            count += 1;
        }
    }
    (worst, count)
}

/// Largest jump between neighbours of `f` sampled at `n` points on `[a, b]`.
fn max_jump(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let xs: Vec<f64> = (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect();
    xs.windows(2)
        .map(|w| (f(w[1]) - f(w[0])).abs())
        .fold(0.0, f64::max)
}

/// Halving the grid step shrinks the largest jump of a continuous function
/// roughly by half; a discontinuity keeps its jump.
fn jump_ratio(f: impl Fn(f64) -> f64 + Copy, a: f64, b: f64) -> f64 {
    max_jump(f, a, b, 4001) / max_jump(f, a, b, 2001)
}

/// Jump ratio below which a sampled function is treated as continuous.
pub const CONTINUITY_RATIO: f64 = 0.6;

/// Named certification suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    /// Multiplier bound, ratio range and operator properties.
    Bounds,
    /// Derivative and semi-gradient finite-difference oracles.
    Gradcheck,
    /// Per-token second-moment bound under lognormal stress.
    Moment,
    /// Dead-zone and tail comparison of the objectives.
    Stress,
    /// Everything above.
    All,
}

impl Suite {
    /// Lower-case name.
    pub fn name(&self) -> &'static str {
        match self {
            Suite::Bounds => "bounds",
            Suite::Gradcheck => "gradcheck",
            Suite::Moment => "moment",
            Suite::Stress => "stress",
            Suite::All => "all",
        }
    }
}

/// Output of [`Lab::run_suite`].
#[derive(Debug, Clone)]
pub struct SuiteOutput {
    /// Combined checks.
    pub report: CertReport,
    /// Stress runs performed by the suite.
    pub stress: Vec<StressReport>,
}

/// Certification entry point.
#[derive(Debug, Clone, Copy)]
pub struct Lab {
    bound: fn(LfmParams) -> f64,
    seed: u64,
}

impl Lab {
    /// Lab using the library's closed-form bound.
    pub fn new(seed: u64) -> Self {
        Lab {
            bound: ratio::multiplier_bound,
            seed,
        }
    }

    /// Lab that certifies against `bound` instead of the library's closed form.
    pub fn with_bound(seed: u64, bound: fn(LfmParams) -> f64) -> Self {
        Lab { bound, seed }
    }

    /// Seed of the random checks.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn bound(&self, c: f64) -> f64 {
        (self.bound)(LfmParams::new(c).expect("c > 0"))
    }

    /// Grid-maximizes `exp(ψ)·sech²` and the full multiplier over
    /// [`BOUND_GRID_POINTS`] log-spaced ratios in [`BOUND_GRID_RANGE`] for each
    /// `c`, comparing with the closed-form bound and with `e^c`.
    pub fn certify_multiplier_bound(&self, c_grid: &[f64]) -> Result<CertReport, CliError> {
        let mut checks = Vec::new();
        for &c in c_grid {
            let p = LfmParams::new(c).map_err(|e| CliError::Validation(e.to_string()))?;
            let dhp = DhpParams::default();
            let t0 = Instant::now();
            let bound = self.bound(c);
            let (lo, hi) = BOUND_GRID_RANGE;
            let (mut env_max, mut env_arg, mut m_max) = (0.0f64, 0.0, 0.0f64);
            for log_r in log_grid(lo, hi, BOUND_GRID_POINTS) {
                let e = ratio::fidelity_envelope_from_log(log_r, p);
                if e > env_max {
                    env_max = e;
                    env_arg = log_r.exp();
                }
                m_max = m_max.max(ratio::gradient_multiplier_from_log(log_r, p, dhp));
            }
            checks.push(
                Check::assert(
                    format!("envelope_max_le_bound[c={c}]"),
                    "max_r exp(psi)sech^2(ln r/c) <= M_psi(c)",
                    env_max <= bound + BOUND_TOL,
                    env_max,
                    bound,
                    BOUND_TOL,
                )
                .note(format!(
                    "maximizer on grid r* = {env_arg:.6}, analytic r* = {:.6}",
                    analytic_maximizer(c)
                ))
                .timed(t0),
            );
            let rel = (env_max - bound).abs() / bound;
            checks.push(Check::assert(
                format!("envelope_max_matches_bound[c={c}]"),
                "closed form is the supremum (grid max within relative tolerance)",
                rel <= BOUND_MATCH_REL,
                rel,
                0.0,
                BOUND_MATCH_REL,
            ));
            checks.push(Check::assert(
                format!("multiplier_max_le_bound[c={c}]"),
                "max_r M(r) <= M_psi(c) with default hazard",
                m_max <= bound + BOUND_TOL,
                m_max,
                bound,
                BOUND_TOL,
            ));
            checks.push(Check::assert(
                format!("bound_lt_exp_c[c={c}]"),
                "M_psi(c) < e^c",
                bound < c.exp(),
                bound,
                c.exp(),
                0.0,
            ));
        }
        let t0 = Instant::now();
        let fine: Vec<f64> = (1..=5000).map(|i| 5.0 * i as f64 / 5000.0).collect();
        let worst = fine
            .iter()
            .map(|&c| self.bound(c) / c.exp())
            .fold(0.0, f64::max);
        checks.push(
            Check::assert(
                "bound_lt_exp_c[fine grid (0,5]]",
                "M_psi(c) < e^c for all c in (0, 5]",
                worst < 1.0,
                worst,
                1.0,
                0.0,
            )
            .note("measured is max over the grid of M_psi(c)/e^c")
            .timed(t0),
        );
        Ok(CertReport::new("bounds", self.seed, checks))
    }

    /// Ratio range, marked points, antisymmetry, local fidelity,
    /// tail attenuation and smoothness against the hard clip.
    pub fn certify_properties(&self, c_grid: &[f64]) -> CertReport {
        let mut checks = Vec::new();
        for (c, stated) in [(1.5, (0.22, 4.48)), (0.5, (0.61, 1.65))] {
            let (lo, hi) = LfmParams::new(c).expect("c > 0").ratio_range();
            let round2 = |x: f64| (x * 100.0).round() / 100.0;
            let ok = round2(lo) == stated.0 && round2(hi) == stated.1;
            checks.push(
                Check::assert(
                    format!("ratio_range[c={c}]"),
                    "[e^-c, e^c] equals the stated interval to 2 decimals",
                    ok,
                    lo,
                    stated.0,
                    0.005,
                )
                .note(format!(
                    "[{lo:.4}, {hi:.4}] vs stated [{}, {}]",
                    stated.0, stated.1
                )),
            );
        }
        let p1 = LfmParams::new(1.0).expect("c > 0");
        let (a, b) = (
            ratio::lfm(2.0, p1).expect("r > 0"),
            ratio::lfm(0.5, p1).expect("r > 0"),
        );
        let err = (a - 0.6).abs().max((b + 0.6).abs());
        checks.push(Check::assert(
            "marked_points[c=1]",
            "psi(2) = 0.6 = -psi(1/2)",
            err <= 1e-12,
            err,
            0.0,
            1e-12,
        ));

        for &c in c_grid {
            let p = LfmParams::new(c).expect("c > 0");
            let t0 = Instant::now();
            let anti = log_grid(1e-6, 1e6, 10_000)
                .map(|l| (ratio::lfm_from_log(-l, p) + ratio::lfm_from_log(l, p)).abs())
                .fold(0.0, f64::max);
            checks.push(
                Check::assert(
                    format!("antisymmetry[c={c}]"),
                    "psi(1/r) = -psi(r)",
                    anti <= 1e-12,
                    anti,
                    0.0,
                    1e-12,
                )
                .timed(t0),
            );

            // |ψ - ln r| against the cubic Taylor remainder, with room for the
            // few ulps of rounding in evaluating both sides
            let mut worst = 0.0f64;
            for l in (0..=2000).map(|i| (i as f64 / 1000.0 - 1.0) * c / 100.0) {
                let remainder =
                    l.abs().powi(3) / (3.0 * c * c) * (1.0 + 1e-6) + 4.0 * f64::EPSILON * l.abs();
                let dev = (ratio::lfm_from_log(l, p) - l).abs();
                if remainder > 0.0 {
                    worst = worst.max(dev / remainder);
                }
            }
            checks.push(
                Check::assert(
                    format!("local_fidelity[c={c}]"),
                    "|psi - ln r| <= |ln r|^3/(3c^2) for |ln r| <= c/100",
                    worst <= 1.0,
                    worst,
                    1.0,
                    0.0,
                )
                .note("measured is the largest deviation as a fraction of the remainder bound"),
            );

            let d_at = |l: f64| ratio::lfm_derivative_from_log(l, p);
            let logs: Vec<f64> = log_grid(1e-6, 1e6, 20_001).collect();
            let ds: Vec<f64> = logs.iter().map(|&l| d_at(l)).collect();
            let peak = ds
                .iter()
                .enumerate()
                .fold(0, |b, (i, &d)| if d > ds[b] { i } else { b });
            let unimodal = ds[..=peak].windows(2).all(|w| w[1] >= w[0])
                && ds[peak..].windows(2).all(|w| w[1] <= w[0]);
            let tail = d_at(1e6f64.ln());
            checks.push(
                Check::assert(
                    format!("attenuation_upper[c={c}]"),
                    "dpsi/dr unimodal and -> 0 as r -> inf",
                    unimodal && tail < 1e-6,
                    tail,
                    1e-6,
                    0.0,
                )
                .note(format!("peak of dpsi/dr at r = {:.4e}", logs[peak].exp())),
            );
            let log_slope = ratio::sech2(1e6f64.ln() / c);
            checks.push(Check::assert(
                format!("attenuation_log[c={c}]"),
                "dpsi/dln r = sech^2(ln r/c) -> 0 at both tails",
                log_slope < 1e-3,
                log_slope,
                1e-3,
                0.0,
            ));
            let low = d_at(1e-6f64.ln());
            checks.push(Check::report(format!("attenuation_lower[c={c}]"), "dpsi/dr at r = 1e-6", low, 0.0).note(
                "dpsi/dr ~ 4 r^(2/c - 1) as r -> 0: it vanishes for c < 2, tends to 4 at c = 2 and diverges for c > 2",
            ));
        }

        // ψ, ψ' and ψ'' (differenced from the analytic ψ') are continuous on
        // [0.5, 2]; the hard clip's coefficient keeps a jump of size ≈ r.
        let p = LfmParams::default();
        let psi = |r: f64| ratio::lfm_from_log(r.ln(), p);
        let d1 = |r: f64| ratio::lfm_derivative_from_log(r.ln(), p);
        let d2 = |r: f64| (d1(r + 1e-5) - d1(r - 1e-5)) / 2e-5;
        for (name, ratio) in [
            ("psi", jump_ratio(psi, 0.5, 2.0)),
            ("dpsi", jump_ratio(d1, 0.5, 2.0)),
            ("d2psi", jump_ratio(d2, 0.5, 2.0)),
        ] {
            checks.push(
                Check::assert(
                    format!("smoothness[{name}]"),
                    "C-infinity: jumps shrink with the grid step on [0.5, 2]",
                    ratio <= CONTINUITY_RATIO,
                    ratio,
                    CONTINUITY_RATIO,
                    0.0,
                )
                .note("measured is max jump at step h/2 over max jump at step h"),
            );
        }
        let grpo = MethodConfig::GrpoClip { eps: 0.2 };
        for (name, adv) in [("pos", 1.0), ("neg", -1.0)] {
            let coef = |r: f64| grpo.token_term_from_log(r.ln(), adv).grad_coefficient;
            let ratio = jump_ratio(coef, 0.5, 2.0);
            let jump = max_jump(coef, 0.5, 2.0, 4001);
            checks.push(
                Check::assert(
                    format!("grpo_clip_jump[{name}]"),
                    "hard clip coefficient jumps by r at 1 +/- eps",
                    ratio > 0.9 && jump > 0.7,
                    ratio,
                    0.9,
                    0.0,
                )
                .note(format!("largest coefficient jump {jump:.4}")),
            );
        }
        CertReport::new("properties", self.seed, checks)
    }

    /// Derivative oracle for `ψ` and the semi-gradient oracle on random
    /// tabular policies: at the snapshot, after drift and with zero advantages.
    pub fn certify_semi_gradient(&self) -> CertReport {
        let mut checks = Vec::new();
        let t0 = Instant::now();
        let mut worst = 0.0f64;
        let mut exact_one = true;
        for &c in &C_GRID {
            let p = LfmParams::new(c).expect("c > 0");
            exact_one &= ratio::lfm_derivative(1.0, p).expect("r > 0") == 1.0;
            for l in log_grid(1e-3, 1e3, 2001) {
                let r = l.exp();
                let a = ratio::lfm_derivative(r, p).expect("r > 0");
                worst = worst.max((a - lfm_derivative_oracle(r, c)).abs() / a);
            }
        }
        checks.push(Check::assert(
            "lfm_derivative_at_anchor",
            "dpsi/dr(1) = 1 exactly",
            exact_one,
            1.0,
            1.0,
            0.0,
        ));
        checks.push(
            Check::assert(
                "lfm_derivative_fd",
                "dpsi/dr matches central differences on r in [1e-3, 1e3]",
                worst < DERIVATIVE_REL_TOL,
                worst,
                DERIVATIVE_REL_TOL,
                0.0,
            )
            .timed(t0),
        );

        let (lfm, dhp) = (LfmParams::default(), DhpParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (mut fresh, mut drifted, mut n_params) = (0.0f64, 0.0f64, 0);
        let (mut anchor_ok, mut drift_seen, mut zero_ok) = (true, 0.0f64, true);
        let t0 = Instant::now();
        for trial in 0..4u64 {
            let (mut params, batch) = random_fixture(&mut rng, self.seed.wrapping_add(trial));
            let eval = surrogate(&params, &batch, &MethodConfig::Mhpo { lfm, dhp });
            let at_one = ratio::survival_weight(0.0, dhp).expect("finite");
            anchor_ok &= eval.ratios.iter().all(|&r| r == 1.0) && eval.max_coefficient == at_one;
            let (e, n) = semi_gradient_error(&params, &batch, lfm, dhp);
            fresh = fresh.max(e);
            n_params += n;

            let keys: Vec<ContextKey> = params.rows().map(|(k, _)| k.clone()).collect();
            for _ in 0..3 {
                for k in &keys {
                    params
                        .row_mut(k)
                        .iter_mut()
                        .for_each(|x| *x += rng.random_range(-0.3..0.3));
                }
            }
            let ratios = surrogate(&params, &batch, &MethodConfig::Mhpo { lfm, dhp }).ratios;
            drift_seen = drift_seen.max(ratios.iter().map(|r| r.ln().abs()).fold(0.0, f64::max));
            drifted = drifted.max(semi_gradient_error(&params, &batch, lfm, dhp).0);

            let mut still = batch.clone();
            still
                .advantages
                .iter_mut()
                .for_each(|a| a.values.iter_mut().for_each(|v| *v = 0.0));
            let g = surrogate(&params, &still, &MethodConfig::Mhpo { lfm, dhp }).gradient;
            zero_ok &= g.rows().all(|(_, r)| r.iter().all(|&x| x == 0.0))
                && semi_gradient_error(&params, &still, lfm, dhp).0 == 0.0;
        }
        checks.push(
            Check::assert(
                "semi_gradient_fd[snapshot]",
                "implemented gradient = d/dtheta of the frozen-penalty surrogate at r = 1",
                fresh < SEMI_GRADIENT_REL_TOL,
                fresh,
                SEMI_GRADIENT_REL_TOL,
                SEMI_GRADIENT_ABS_FLOOR,
            )
            .note(format!("{n_params} logits over 4 random policies"))
            .timed(t0),
        );
        checks.push(Check::assert(
            "semi_gradient_anchor_coefficient",
            "at the snapshot every coefficient equals exp(-zeta(1))",
            anchor_ok,
            ratio::survival_weight(0.0, dhp).expect("finite"),
            ratio::survival_weight(0.0, dhp).expect("finite"),
            0.0,
        ));
        checks.push(
            Check::assert(
                "semi_gradient_fd[drifted]",
                "same after three perturbation steps (r != 1)",
                drifted < SEMI_GRADIENT_REL_TOL && drift_seen > 0.05,
                drifted,
                SEMI_GRADIENT_REL_TOL,
                SEMI_GRADIENT_ABS_FLOOR,
            )
            .note(format!("largest |ln r| after drift {drift_seen:.3}")),
        );
        checks.push(Check::assert(
            "semi_gradient_zero_advantage",
            "A = 0 gives an exactly zero gradient both ways",
            zero_ok,
            0.0,
            0.0,
            0.0,
        ));
        CertReport::new("gradcheck", self.seed, checks)
    }

    /// Monte Carlo check of the per-token second-moment bound over
    /// `(r, A, score)` triples, with `r` and `A` from `spec` and score vectors
    /// of random categorical rows. The right-hand side takes the largest `A²`
    /// and `‖score‖²` of the same draws; the form with their empirical means
    /// is asserted as well. Batch-level moments and the unmodulated
    /// estimator are reported alongside.
    pub fn certify_second_moment(
        &self,
        spec: &StressSpec,
        lfm: LfmParams,
        dhp: DhpParams,
    ) -> Result<CertReport, CliError> {
        spec.validate()?;
        let t0 = Instant::now();
        let bound = (self.bound)(lfm);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (mut sum, mut sum_naive, mut sum_a2, mut sum_g2) = (0.0, 0.0, 0.0, 0.0);
        let (mut sup_a2, mut sup_g2) = (0.0f64, 0.0f64);
        let mut batch_acc = [0.0; SCORE_VOCAB];
        let (mut batch_sum, mut batches) = (0.0, 0usize);
        let mut anchor_pred = 0.0;
        let at_one = ratio::survival_weight(0.0, dhp).expect("finite");
        for i in 0..spec.n_samples {
            let log_r = spec.ratios.sample_log(&mut rng);
            let a = spec.advantages.sample(&mut rng);
            let score = random_score(&mut rng);
            let g_sq: f64 = score.iter().map(|x| x * x).sum();
            let m = ratio::gradient_multiplier_from_log(log_r, lfm, dhp);
            sum += m * m * a * a * g_sq;
            sum_naive += log_r.exp().powi(2) * a * a * g_sq;
            anchor_pred += at_one * at_one * a * a * g_sq;
            sum_a2 += a * a;
            sum_g2 += g_sq;
            sup_a2 = sup_a2.max(a * a);
            sup_g2 = sup_g2.max(g_sq);
            for (acc, s) in batch_acc.iter_mut().zip(&score) {
                *acc += m * a * s / MOMENT_BATCH as f64;
            }
            if (i + 1) % MOMENT_BATCH == 0 {
                batch_sum += batch_acc.iter().map(|x| x * x).sum::<f64>();
                batch_acc.iter_mut().for_each(|x| *x = 0.0);
                batches += 1;
            }
        }
        let n = spec.n_samples as f64;
        let lhs = sum / n;
        let rhs = sup_a2 * sup_g2 * bound * bound;
        let rhs_mean = (sum_a2 / n) * (sum_g2 / n) * bound * bound;
        let label = spec.ratios.label();
        let mut checks = vec![
            Check::assert(
                format!("second_moment[{label}]"),
                "E||M(r) A score||^2 <= max A^2 max ||score||^2 M_psi(c)^2",
                lhs <= rhs,
                lhs,
                rhs,
                0.0,
            )
            .note(format!("slack factor {:.3}; c = {}", rhs / lhs, lfm.c()))
            .timed(t0),
            Check::assert(
                format!("second_moment_mean_form[{label}]"),
                "E||M(r) A score||^2 <= E[A^2] E||score||^2 M_psi(c)^2",
                lhs <= rhs_mean,
                lhs,
                rhs_mean,
                0.0,
            )
            .note(format!("slack factor {:.3}", rhs_mean / lhs)),
        ];
        if let RatioDistribution::Lognormal { mu, sigma } = spec.ratios {
            if mu == 0.0 && sigma == 0.0 {
                let rel = (lhs - anchor_pred / n).abs() / lhs;
                checks.push(Check::assert(
                    format!("second_moment_anchor[{label}]"),
                    "at r = 1 the moment equals exp(-2 zeta(1)) E||A score||^2",
                    rel <= 1e-12 && lhs < rhs,
                    rel,
                    0.0,
                    1e-12,
                ));
            }
        }
        checks.push(Check::report(
            format!("second_moment_naive_ratio[{label}]"),
            "E||r A score||^2 / E||M(r) A score||^2",
            sum_naive / sum,
            1.0,
        ));
        if batches > 0 {
            checks.push(
                Check::report(
                    format!("second_moment_batch[{label}]"),
                    "batch-level E||mean of 64 tokens||^2 (not asserted)",
                    batch_sum / batches as f64,
                    rhs,
                )
                .note(format!("{batches} mini-batches")),
            );
        }
        Ok(CertReport::new("moment", spec.seed, checks))
    }

    /// Per-objective coefficient statistics over the draws of `spec`.
    pub fn stress_compare(&self, spec: &StressSpec) -> Result<StressReport, CliError> {
        spec.validate()?;
        let draws = spec.draws();
        let transforms = spec
            .transforms
            .iter()
            .map(|m| {
                let coefs: Vec<f64> = draws
                    .iter()
                    .map(|&(l, a)| m.token_term_from_log(l, a).grad_coefficient.abs())
                    .collect();
                let zeros = coefs.iter().filter(|&&c| c == 0.0).count();
                let mut sorted = coefs.clone();
                sorted.sort_by(f64::total_cmp);
                let tenth = coefs.len() / 10;
                TransformStats {
                    label: transform_label(m),
                    method: m.name().into(),
                    n: coefs.len(),
                    dead_zone_fraction: zeros as f64 / coefs.len() as f64,
                    p999: stats::quantile_sorted(&sorted, 0.999),
                    max: sorted[sorted.len() - 1],
                    max_first_tenth: coefs[..tenth.max(1)].iter().cloned().fold(0.0, f64::max),
                    mean: coefs.iter().sum::<f64>() / coefs.len() as f64,
                    bound: match m {
                        MethodConfig::Mhpo { lfm, .. } => Some((self.bound)(*lfm)),
                        _ => None,
                    },
                    histogram: histogram(&coefs),
                }
            })
            .collect();
        Ok(StressReport {
            ratios: spec.ratios.label(),
            advantages: spec.advantages,
            seed: spec.seed,
            transforms,
        })
    }

    /// Dead-zone and bound assertions on a stress report.
    pub fn stress_checks(&self, report: &StressReport) -> CertReport {
        let tag = format!("{},{:?}", report.ratios, report.advantages).to_lowercase();
        let mut checks = Vec::new();
        for t in &report.transforms {
            match t.method.as_str() {
                "mhpo" => {
                    let b = t.bound.unwrap_or(f64::NAN);
                    checks.push(Check::assert(
                        format!("mhpo_no_dead_zone[{tag}]"),
                        "smooth objective never zeroes a coefficient",
                        t.dead_zone_fraction == 0.0,
                        t.dead_zone_fraction,
                        0.0,
                        0.0,
                    ));
                    checks.push(Check::assert(
                        format!("mhpo_max_le_bound[{tag}]"),
                        "max coefficient <= M_psi(c)",
                        t.max <= b,
                        t.max,
                        b,
                        0.0,
                    ));
                }
                "grpo_clip" => checks.push(Check::assert(
                    format!("grpo_dead_zone[{tag}]"),
                    "hard clip has a vanishing-gradient region",
                    t.dead_zone_fraction > 0.0,
                    t.dead_zone_fraction,
                    0.0,
                    0.0,
                )),
                "dapo_clip" => checks.push(Check::report(
                    format!("dapo_dead_zone[{tag}]"),
                    "asymmetric clip dead-zone fraction",
                    t.dead_zone_fraction,
                    0.0,
                )),
                _ => checks.push(
                    Check::report(
                        format!("naive_max_growth[{tag}]"),
                        "max coefficient over all draws / over the first tenth",
                        t.max / t.max_first_tenth,
                        1.0,
                    )
                    .note(format!("max {:.4e}, p99.9 {:.4e}", t.max, t.p999)),
                ),
            }
        }
        CertReport::new("stress", report.seed, checks)
    }

    /// Runs a named suite.
    pub fn run_suite(&self, suite: Suite) -> Result<SuiteOutput, CliError> {
        let seed = self.seed;
        let mut parts = Vec::new();
        let mut stress = Vec::new();
        if matches!(suite, Suite::Bounds | Suite::All) {
            parts.push(self.certify_multiplier_bound(&C_GRID)?);
            parts.push(self.certify_properties(&C_GRID));
        }
        if matches!(suite, Suite::Gradcheck | Suite::All) {
            parts.push(self.certify_semi_gradient());
        }
        if matches!(suite, Suite::Moment | Suite::All) {
            for (i, sigma) in [0.0, 0.5, 1.0, 2.0, 3.0].into_iter().enumerate() {
                let spec = StressSpec::new(
                    RatioDistribution::Lognormal { mu: 0.0, sigma },
                    AdvantageDistribution::StandardNormal,
                    100_000,
                    seed.wrapping_add(i as u64),
                );
                parts.push(self.certify_second_moment(
                    &spec,
                    LfmParams::default(),
                    DhpParams::default(),
                )?);
            }
        }
        if matches!(suite, Suite::Stress | Suite::All) {
            for (i, (ratios, adv)) in [
                (
                    RatioDistribution::Lognormal {
                        mu: 0.0,
                        sigma: 1.0,
                    },
                    AdvantageDistribution::Rademacher,
                ),
                (
                    RatioDistribution::Lognormal {
                        mu: 0.0,
                        sigma: 3.0,
                    },
                    AdvantageDistribution::StandardNormal,
                ),
                (
                    RatioDistribution::ParetoTail {
                        alpha: 1.5,
                        mix: 0.05,
                    },
                    AdvantageDistribution::Rademacher,
                ),
            ]
            .into_iter()
            .enumerate()
            {
                let spec = StressSpec::new(ratios, adv, 100_000, seed.wrapping_add(100 + i as u64));
                let rep = self.stress_compare(&spec)?;
                parts.push(self.stress_checks(&rep));
                stress.push(rep);
            }
        }
        Ok(SuiteOutput {
            report: CertReport::merge(suite.name(), seed, parts),
            stress,
        })
    }
}

/// `argmax_r exp(ψ(r))·sech²(ln r / c)`: with `t = tanh(ln r / c)` the
/// stationarity condition is `c(1 - t²) = 2t`.
pub fn analytic_maximizer(c: f64) -> f64 {
    let t = ((1.0 + c * c).sqrt() - 1.0) / c;
    (c * t.atanh()).exp()
}

fn random_score(rng: &mut ChaCha8Rng) -> [f64; SCORE_VOCAB] {
    let logits: [f64; SCORE_VOCAB] =
        std::array::from_fn(|_| 1.5 * rng.sample::<f64, _>(StandardNormal));
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
    let probs = logits.map(|x| (x - m).exp() / z);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut tok = SCORE_VOCAB - 1;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            tok = i;
            break;
        }
    }
    let mut s = probs.map(|p| -p);
    s[tok] += 1.0;
    s
}

/// Random order-1 policy over a 3-arm bandit with two prompts, and one
/// sampled batch with at least one informative group.
fn random_fixture(rng: &mut ChaCha8Rng, seed: u64) -> (PolicyParams, Batch) {
    let env = EnvSpec::new(EnvKind::Bandit { arms: 3 }, 2).expect("valid env");
    let shape = PolicyShape::new(env.vocab_size(), 1, 4).expect("valid shape");
    loop {
        let mut params = PolicyParams::uniform(shape);
        for prompt in 0..2 {
            for prev in [shape.bos(), 0, 1, 2] {
                let row = (0..shape.vocab_size)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                params
                    .set_row(
                        ContextKey {
                            prompt,
                            context: vec![prev],
                        },
                        row,
                    )
                    .expect("finite row");
            }
        }
        let groups = (0..2)
            .map(|p| {
                rollout::sample_group(
                    &params,
                    &env,
                    p,
                    6,
                    RolloutSeed {
                        seed,
                        step: 0,
                        slot: p as u64,
                    },
                )
                .expect("valid group")
            })
            .collect();
        let batch = Batch::new(groups, 1e-8).expect("valid batch");
        if batch.degenerate_groups() < 2 {
            return (params, batch);
        }
    }
}
