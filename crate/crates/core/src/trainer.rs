//! Rollout → advantage → surrogate gradient → update loop.
//!
//! One [`Trainer::train_step`] freezes a snapshot of the policy, samples
//! `prompts_per_batch` groups from it, standardizes rewards per group and
//! then runs `updates_per_rollout` gradient updates on that fixed batch.
//! Ratios are always taken against the snapshot, so every inner update after
//! the first sees genuine off-policy drift.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::advantage::{self, AdvantageVector};
use crate::env::EnvSpec;
use crate::objective::MethodConfig;
use crate::optim::{self, OptimizerKind, OptimizerState};
use crate::policy::{Gradient, PolicyParams};
use crate::rollout::{self, RolloutGroup, RolloutSeed};
use crate::stats;
use crate::{Error, Result};

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Surrogate objective.
    pub method: MethodConfig,
    /// Task.
    pub env: EnvSpec,
    /// Markov order of the policy.
    pub order: usize,
    /// Maximum response length.
    pub max_len: usize,
    /// Responses per prompt, `K`.
    pub group_size: usize,
    /// Groups per rollout batch.
    pub prompts_per_batch: usize,
    /// Gradient updates on each rollout batch.
    pub updates_per_rollout: usize,
    /// Update rule.
    pub optimizer: OptimizerKind,
    /// Step size.
    pub learning_rate: f64,
    /// Number of [`Trainer::train_step`] calls in a run.
    pub total_steps: u64,
    /// Greedy evaluation period in steps; the final step is always evaluated.
    pub eval_every: u64,
    /// Run seed.
    pub seed: u64,
    /// Spread below which a reward group counts as degenerate.
    pub degeneracy_tol: f64,
}

impl TrainConfig {
    /// Reference toy configuration on `env` with the given method.
    pub fn toy(method: MethodConfig, env: EnvSpec) -> Self {
        Self {
            method,
            env,
            order: 2,
            max_len: 16,
            group_size: 8,
            prompts_per_batch: 16,
            updates_per_rollout: 4,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.05,
            total_steps: 500,
            eval_every: 10,
            seed: 0,
            degeneracy_tol: advantage::DEFAULT_DEGENERACY_TOL,
        }
    }

    /// Checks every invariant of the configuration.
    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        self.optimizer.validate()?;
        self.env.policy_shape(self.order, self.max_len)?;
        if self.group_size < 2 {
            return Err(Error::config(
                "train.group_size",
                alloc::format!("must be at least 2, got {}", self.group_size),
            ));
        }
        if self.prompts_per_batch == 0 {
            return Err(Error::config(
                "train.prompts_per_batch",
                "must be at least 1",
            ));
        }
        if self.updates_per_rollout == 0 {
            return Err(Error::config(
                "train.updates_per_rollout",
                "must be at least 1",
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(
                "train.learning_rate",
                alloc::format!("must be finite and > 0, got {}", self.learning_rate),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be at least 1"));
        }
        if !(self.degeneracy_tol > 0.0) {
            return Err(Error::config("train.degeneracy_tol", "must be > 0"));
        }
        Ok(())
    }
}

/// A rollout batch with its advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Sampled groups.
    pub groups: Vec<RolloutGroup>,
    /// Advantages, one vector per group.
    pub advantages: Vec<AdvantageVector>,
}

impl Batch {
    /// Standardizes every group's rewards.
    pub fn new(groups: Vec<RolloutGroup>, degeneracy_tol: f64) -> Result<Self> {
        let advantages = groups
            .iter()
            .map(|g| advantage::group_normalize(&g.rewards, degeneracy_tol))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { groups, advantages })
    }

    /// Groups whose advantages were zeroed.
    pub fn degenerate_groups(&self) -> usize {
        self.advantages.iter().filter(|a| a.degenerate).count()
    }

    /// Mean reward over all responses.
    pub fn mean_reward(&self) -> f64 {
        let (sum, n) = self
            .groups
            .iter()
            .flat_map(|g| g.rewards.iter())
            .fold((0.0, 0usize), |(s, n), r| (s + r, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Surrogate loss, its semi-gradient and per-token diagnostics at the
/// current parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateEval {
    /// `-(1/K) Σ_i (1/T_i) Σ_t term`, K counting non-empty responses.
    pub loss: f64,
    /// Gradient of the loss with the hazard penalty held constant.
    pub gradient: Gradient,
    /// Ratio of every credited token, in batch order.
    pub ratios: Vec<f64>,
    /// Largest `|grad_coefficient|` over all tokens.
    pub max_coefficient: f64,
    /// Responses with no credited token.
    pub skipped_empty: usize,
}

/// Evaluates the surrogate of `method` for `params` against the log-probs
/// recorded in `batch`. Responses are reduced in batch order.
pub fn surrogate(params: &PolicyParams, batch: &Batch, method: &MethodConfig) -> SurrogateEval {
    let mut gradient = Gradient::new();
    let mut ratios = Vec::new();
    let mut max_coefficient = 0.0f64;
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    let responses = batch
        .groups
        .iter()
        .map(|g| g.responses.iter().filter(|r| r.policy_len() > 0).count())
        .sum::<usize>();
    let norm = if responses == 0 {
        0.0
    } else {
        1.0 / responses as f64
    };
    for (group, adv) in batch.groups.iter().zip(&batch.advantages) {
        for (resp, &a) in group.responses.iter().zip(&adv.values) {
            let t_i = resp.policy_len();
            if t_i == 0 {
                skipped += 1;
                continue;
            }
            used += 1;
            let mut resp_sum = 0.0;
            for ((key, &old), &tok) in resp
                .contexts
                .iter()
                .zip(&resp.old_logprobs)
                .zip(resp.policy_tokens())
            {
                let log_r = params.logprob_at(key, tok) - old;
                let term = method.token_term_from_log(log_r, a);
                ratios.push(libm::exp(log_r));
                max_coefficient = max_coefficient.max(libm::fabs(term.grad_coefficient));
                resp_sum += term.objective_value;
                if a != 0.0 {
                    let scale = -norm / t_i as f64 * term.grad_coefficient * a;
                    gradient.add_scaled(key, &params.score(key, tok), scale);
                }
            }
            total += resp_sum / t_i as f64;
        }
    }
    debug_assert_eq!(used, responses);
    SurrogateEval {
        loss: -total * norm,
        gradient,
        ratios,
        max_coefficient,
        skipped_empty: skipped,
    }
}

/// Diagnostics of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based step index.
    pub step: u64,
    /// Mean reward of the rollout batch.
    pub mean_reward: f64,
    /// Surrogate loss averaged over the inner updates.
    pub loss: f64,
    /// Largest gradient L2 norm among the inner updates.
    pub grad_norm: f64,
    /// Largest `|grad_coefficient|` over all tokens and inner updates.
    pub max_multiplier: f64,
    /// Smallest ratio seen across the inner updates.
    pub ratio_min: f64,
    /// Median ratio across the inner updates.
    pub ratio_med: f64,
    /// Largest ratio seen across the inner updates.
    pub ratio_max: f64,
    /// Groups with zeroed advantages.
    pub degenerate_groups: usize,
    /// Greedy success rate, on evaluation steps.
    pub eval_success: Option<f64>,
    /// Responses judged malformed.
    pub malformed: usize,
    /// Set when the step was rolled back.
    pub incident: Option<Incident>,
}

/// A rolled-back step.
#[derive(Debug, Clone, PartialEq)]
pub struct Incident {
    /// Step index.
    pub step: u64,
    /// Inner update (1-based) that failed.
    pub inner_update: usize,
    /// What went wrong.
    pub reason: String,
}

/// Parameters captured at a given step.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Step at which the snapshot was taken.
    pub step: u64,
    /// Greedy success rate of the snapshot.
    pub eval_success: f64,
    /// The policy.
    pub params: PolicyParams,
}

/// Outcome of a complete run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    /// One record per step.
    pub log: Vec<StepRecord>,
    /// Highest-scoring evaluated checkpoint (earliest on ties).
    pub best: Checkpoint,
    /// Final parameters.
    pub latest: Checkpoint,
    /// Rolled-back steps.
    pub incidents: Vec<Incident>,
}

impl RunResult {
    /// `latest - best` greedy success.
    pub fn delta(&self) -> f64 {
        self.latest.eval_success - self.best.eval_success
    }
}

/// Training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    params: PolicyParams,
    opt: OptimizerState,
    step: u64,
    best: Option<Checkpoint>,
    log: Vec<StepRecord>,
    incidents: Vec<Incident>,
}

impl Trainer {
    /// Fresh uniform policy.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = PolicyParams::uniform(cfg.env.policy_shape(cfg.order, cfg.max_len)?);
        Ok(Self::with_params(cfg, params))
    }

    /// Starts from given parameters (shape must match the config).
    pub fn with_params(cfg: TrainConfig, params: PolicyParams) -> Self {
        Self {
            cfg,
            params,
            opt: OptimizerState::default(),
            step: 0,
            best: None,
            log: Vec::new(),
            incidents: Vec::new(),
        }
    }

    /// Configuration.
    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Current parameters.
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    /// Steps taken.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Records so far.
    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }

    /// Samples a rollout batch from `behaviour` for step `step`.
    pub fn sample_batch(&self, behaviour: &PolicyParams, step: u64) -> Result<Batch> {
        let cfg = &self.cfg;
        let mut prompt_rng = rollout::stream_rng(
            RolloutSeed {
                seed: cfg.seed,
                step,
                slot: u64::MAX,
            },
            0,
        );
        let mut groups = Vec::with_capacity(cfg.prompts_per_batch);
        for slot in 0..cfg.prompts_per_batch {
            let prompt = prompt_rng.random_range(0..cfg.env.num_prompts);
            let seed = RolloutSeed {
                seed: cfg.seed,
                step,
                slot: slot as u64,
            };
            groups.push(rollout::sample_group(
                behaviour,
                &cfg.env,
                prompt,
                cfg.group_size,
                seed,
            )?);
        }
        Batch::new(groups, cfg.degeneracy_tol)
    }

    fn apply(&mut self, grad: &Gradient) -> Result<()> {
        match self.cfg.optimizer {
            OptimizerKind::Sgd => optim::sgd_update(&mut self.params, grad, self.cfg.learning_rate),
            OptimizerKind::AdaptiveMoment {
                beta1,
                beta2,
                epsilon_hat,
            } => optim::adaptive_update(
                &mut self.params,
                grad,
                &mut self.opt,
                self.cfg.learning_rate,
                (beta1, beta2),
                epsilon_hat,
            ),
        }
    }

    /// One rollout phase followed by `updates_per_rollout` updates.
    pub fn train_step(&mut self) -> Result<&StepRecord> {
        self.step += 1;
        let step = self.step;
        let snapshot = self.params.snapshot();
        let batch = self.sample_batch(&snapshot, step)?;
        let saved_opt = self.opt.clone();

        let mut ratios = Vec::new();
        let mut loss_sum = 0.0;
        let mut grad_norm = 0.0f64;
        let mut max_multiplier = 0.0f64;
        let mut incident = None;
        for inner in 1..=self.cfg.updates_per_rollout {
            let eval = surrogate(&self.params, &batch, &self.cfg.method);
            let norm = eval.gradient.norm_l2();
            ratios.extend_from_slice(&eval.ratios);
            max_multiplier = max_multiplier.max(eval.max_coefficient);
            loss_sum += eval.loss;
            grad_norm = if norm.is_nan() {
                f64::NAN
            } else {
                grad_norm.max(norm)
            };
            let failure = if !eval.loss.is_finite() {
                Some(Error::NonFinite("loss"))
            } else {
                match self.apply(&eval.gradient) {
                    Err(e) => Some(e),
                    Ok(()) if !self.params.is_finite() => Some(Error::NonFinite("parameters")),
                    Ok(()) => None,
                }
            };
            if let Some(e) = failure {
                incident = Some(Incident {
                    step,
                    inner_update: inner,
                    reason: e.to_string(),
                });
                break;
            }
        }
        let inner_done = incident
            .as_ref()
            .map_or(self.cfg.updates_per_rollout, |i| i.inner_update);
        if let Some(inc) = &incident {
            self.params = snapshot;
            self.opt = saved_opt;
            self.incidents.push(inc.clone());
        }

        let (ratio_min, ratio_med, ratio_max) =
            stats::min_median_max(&ratios).unwrap_or((1.0, 1.0, 1.0));
        let eval_success = (step % self.cfg.eval_every == 0 || step == self.cfg.total_steps)
            .then(|| evaluate(&self.params, &self.cfg.env));
        if let Some(score) = eval_success {
            if self.best.as_ref().is_none_or(|b| score > b.eval_success) {
                self.best = Some(Checkpoint {
                    step,
                    eval_success: score,
                    params: self.params.snapshot(),
                });
            }
        }
        self.log.push(StepRecord {
            step,
            mean_reward: batch.mean_reward(),
            loss: loss_sum / inner_done as f64,
            grad_norm,
            max_multiplier,
            ratio_min,
            ratio_med,
            ratio_max,
            degenerate_groups: batch.degenerate_groups(),
            eval_success,
            malformed: batch.groups.iter().map(|g| g.malformed).sum(),
            incident,
        });
        Ok(self.log.last().expect("record just pushed"))
    }

    /// Runs the remaining steps and returns the log with best/latest checkpoints.
    pub fn run(mut self) -> Result<RunResult> {
        while self.step < self.cfg.total_steps {
            self.train_step()?;
        }
        let latest_score = self
            .log
            .last()
            .and_then(|r| r.eval_success)
            .unwrap_or_else(|| evaluate(&self.params, &self.cfg.env));
        let latest = Checkpoint {
            step: self.step,
            eval_success: latest_score,
            params: self.params,
        };
        let best = self.best.unwrap_or_else(|| latest.clone());
        Ok(RunResult {
            log: self.log,
            best,
            latest,
            incidents: self.incidents,
        })
    }
}

/// Fraction of prompts `0..num_prompts` whose greedy decode is correct.
pub fn evaluate(params: &PolicyParams, env: &EnvSpec) -> f64 {
    evaluate_prompts(params, env, env.num_prompts)
}

/// Greedy success over the first `n_prompts` prompts.
pub fn evaluate_prompts(params: &PolicyParams, env: &EnvSpec, n_prompts: u32) -> f64 {
    if n_prompts == 0 {
        return 0.0;
    }
    let hits = (0..n_prompts)
        .filter(|&p| env.verify_reward(p, &rollout::greedy_response(params, p)) == 1.0)
        .count();
    hits as f64 / n_prompts as f64
}

/// Sampled success rate: `samples` draws per prompt.
pub fn evaluate_sampled(params: &PolicyParams, env: &EnvSpec, samples: usize, seed: u64) -> f64 {
    let mut hits = 0usize;
    for p in 0..env.num_prompts {
        for i in 0..samples {
            let mut rng = rollout::stream_rng(
                RolloutSeed {
                    seed,
                    step: u64::MAX,
                    slot: p as u64,
                },
                i as u64,
            );
            let resp = rollout::sample_response(params, p, &mut rng);
            if env.verify_reward(p, &resp.tokens) == 1.0 {
                hits += 1;
            }
        }
    }
    hits as f64 / (samples * env.num_prompts as usize).max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvKind;
    use crate::ratio::{self, DhpParams};
    use alloc::vec;

    fn parity_cfg(method: MethodConfig) -> TrainConfig {
        let env = EnvSpec::new(EnvKind::Parity, 4).unwrap();
        let mut cfg = TrainConfig::toy(method, env);
        cfg.total_steps = 5;
        cfg.eval_every = 2;
        cfg
    }

    #[test]
    fn config_validation() {
        let mut cfg = parity_cfg(MethodConfig::NaivePg);
        assert!(cfg.validate().is_ok());
        cfg.updates_per_rollout = 0;
        assert!(matches!(
            cfg.validate(),
            Err(Error::Config {
                field: "train.updates_per_rollout",
                ..
            })
        ));
        let mut cfg = parity_cfg(MethodConfig::NaivePg);
        cfg.learning_rate = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = parity_cfg(MethodConfig::NaivePg);
        cfg.group_size = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn degenerate_batch_leaves_params_unchanged() {
        // a policy that always emits EOS solves every even prompt
        let env = EnvSpec::new(EnvKind::Parity, 1).unwrap();
        let mut cfg = TrainConfig::toy(MethodConfig::mhpo_default(), env);
        cfg.total_steps = 3;
        let mut params = PolicyParams::uniform(env.policy_shape(cfg.order, cfg.max_len).unwrap());
        let shape = params.shape();
        params
            .set_row(shape.context_key(0, &[]), vec![-1e3, -1e3, 0.0])
            .unwrap();
        let mut tr = Trainer::with_params(cfg, params.clone());
        let rec = tr.train_step().unwrap().clone();
        assert_eq!(rec.degenerate_groups, 16);
        assert_eq!(rec.grad_norm, 0.0);
        assert_eq!(tr.params(), &params);
    }

    #[test]
    fn first_update_is_scaled_naive_direction() {
        let cfg = parity_cfg(MethodConfig::mhpo_default());
        let tr = Trainer::new(cfg.clone()).unwrap();
        let batch = tr.sample_batch(tr.params(), 1).unwrap();
        let m = surrogate(tr.params(), &batch, &cfg.method);
        let n = surrogate(tr.params(), &batch, &MethodConfig::NaivePg);
        assert!(m.ratios.iter().all(|&r| r == 1.0));
        let anchor = (-ratio::dhp_penalty(0.0, DhpParams::default()).unwrap()).exp();
        let (mut dot, mut mm, mut nn) = (0.0, 0.0, 0.0);
        for (key, nrow) in n.gradient.rows() {
            let mrow = m.gradient.row(key).unwrap();
            for (a, b) in mrow.iter().zip(nrow) {
                dot += a * b;
                mm += a * a;
                nn += b * b;
                assert!((a - anchor * b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
        assert!((dot / (mm.sqrt() * nn.sqrt()) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn later_inner_updates_see_drift() {
        let mut cfg = parity_cfg(MethodConfig::mhpo_default());
        cfg.updates_per_rollout = 2;
        let mut tr = Trainer::new(cfg).unwrap();
        let rec = tr.train_step().unwrap();
        assert!(rec.degenerate_groups < 16);
        assert!(rec.ratio_max > 1.0 || rec.ratio_min < 1.0);
        assert!(rec.max_multiplier <= ratio::multiplier_bound(Default::default()));
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = parity_cfg(MethodConfig::grpo_clip(0.2).unwrap());
        let a = Trainer::new(cfg.clone()).unwrap().run().unwrap();
        let b = Trainer::new(cfg).unwrap().run().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log.len(), 5);
        assert!(a.log[4].eval_success.is_some());
        assert!(a.log[0].eval_success.is_none());
    }

    #[test]
    fn non_finite_update_rolls_back() {
        let env = EnvSpec::new(EnvKind::Parity, 2).unwrap();
        let mut cfg = TrainConfig::toy(MethodConfig::NaivePg, env);
        cfg.updates_per_rollout = 3;
        let mut params = PolicyParams::uniform(env.policy_shape(cfg.order, cfg.max_len).unwrap());
        let key = params.shape().context_key(1, &[1]);
        params.row_mut(&key)[0] = f64::NAN;
        let mut tr = Trainer::with_params(cfg, params);
        let mut saw = false;
        for _ in 0..5 {
            let before = tr.params().clone();
            let rec = tr.train_step().unwrap().clone();
            if let Some(inc) = rec.incident {
                assert_eq!(inc.inner_update, 1);
                assert!(tr
                    .params()
                    .rows()
                    .zip(before.rows())
                    .all(|(a, b)| a.0 == b.0
                        && a.1.iter().zip(b.1).all(|(x, y)| x.to_bits() == y.to_bits())));
                saw = true;
            }
        }
        assert!(saw);
    }

    #[test]
    fn evaluation_extremes() {
        let env = EnvSpec::new(EnvKind::Bandit { arms: 3 }, 3).unwrap();
        let shape = env.policy_shape(1, 4).unwrap();
        let mut good = PolicyParams::uniform(shape);
        let mut bad = PolicyParams::uniform(shape);
        for p in 0..3u32 {
            let mut row = vec![0.0; 4];
            row[p as usize] = 5.0;
            good.set_row(shape.context_key(p, &[]), row).unwrap();
            let mut row = vec![0.0; 4];
            row[((p + 1) % 3) as usize] = 5.0;
            bad.set_row(shape.context_key(p, &[]), row).unwrap();
            for arm in 0..3 {
                good.set_row(shape.context_key(p, &[arm]), vec![0.0, 0.0, 0.0, 5.0])
                    .unwrap();
            }
        }
        assert_eq!(evaluate(&good, &env), 1.0);
        assert_eq!(evaluate(&bad, &env), 0.0);
        // uniform first token over arms plus EOS: hit rate 1/V
        let uniform = PolicyParams::uniform(shape);
        let s = evaluate_sampled(&uniform, &env, 2000, 1);
        assert!((s - 0.25).abs() < 0.03, "{s}");
    }
}
