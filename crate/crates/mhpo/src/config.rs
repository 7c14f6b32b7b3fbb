//! Run configuration files.
//!
//! A run is described by one TOML document with four sections:
//!
//! ```toml
//! [method]
//! name = "mhpo"          # mhpo | grpo_clip | dapo_clip | naive_pg
//! c = 1.5                # mhpo only; k_pos, lambda_pos, k_neg, lambda_neg likewise
//!
//! [env]
//! kind = "parity"        # parity | digit_sum | bandit (needs `arms`)
//! num_prompts = 16
//! order = 2
//! max_len = 16
//!
//! [train]
//! group_size = 8
//! optimizer = "sgd"      # sgd | adaptive_moment (takes beta1, beta2, epsilon_hat)
//! learning_rate = 0.05
//!
//! [report]
//! label = "mhpo"
//! ```
//!
//! Unknown keys are rejected. Fields that belong to another method or
//! optimizer are rejected too, so a config never carries settings that are
//! silently ignored. [`RunConfig::resolve`] fills every default and the
//! resolved document is what gets written next to the run.

use std::path::Path;

use mhpo_core::env::{EnvKind, EnvSpec};
use mhpo_core::objective::MethodConfig;
use mhpo_core::optim::OptimizerKind;
use mhpo_core::ratio::{DhpParams, LfmParams};
use mhpo_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// `[method]` section.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    /// Objective identifier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Saturation bound (mhpo).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    /// Hazard shape for positive shifts (mhpo).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_pos: Option<f64>,
    /// Hazard scale for positive shifts (mhpo).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_pos: Option<f64>,
    /// Hazard shape for negative shifts (mhpo).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_neg: Option<f64>,
    /// Hazard scale for negative shifts (mhpo).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_neg: Option<f64>,
    /// Symmetric clip width (grpo_clip).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    /// Lower clip width (dapo_clip).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_low: Option<f64>,
    /// Upper clip width (dapo_clip).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_high: Option<f64>,
}

/// `[env]` section.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    /// Task family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    /// Number of prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_prompts: Option<u32>,
    /// Arms of the bandit task (bandit only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arms: Option<u32>,
    /// Markov order of the policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    /// Maximum response length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
}

/// `[train]` section.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Responses per prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    /// Groups per rollout batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts_per_batch: Option<usize>,
    /// Updates per rollout batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub updates_per_rollout: Option<usize>,
    /// `sgd` or `adaptive_moment`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<String>,
    /// Step size; defaults to 0.05 for sgd and 0.01 for adaptive_moment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    /// First-moment decay (adaptive_moment).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    /// Second-moment decay (adaptive_moment).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    /// Denominator guard (adaptive_moment).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_hat: Option<f64>,
    /// Training steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_steps: Option<u64>,
    /// Evaluation period.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<u64>,
    /// Run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Reward spread below which a group is degenerate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degeneracy_tol: Option<f64>,
}

/// `[report]` section.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// Legend and table label; defaults to the method name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// A parsed configuration document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Objective.
    #[serde(default)]
    pub method: MethodSection,
    /// Task and policy dimensions.
    #[serde(default)]
    pub env: EnvSection,
    /// Loop and optimizer.
    #[serde(default)]
    pub train: TrainSection,
    /// Report labels.
    #[serde(default)]
    pub report: ReportSection,
}

fn invalid(field: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{field}: {reason}"))
}

fn forbid<T>(field: &str, value: &Option<T>, owner: &str) -> Result<(), CliError> {
    match value {
        Some(_) => Err(invalid(field, format!("only valid for {owner}"))),
        None => Ok(()),
    }
}

fn require<T: Copy>(field: &str, value: Option<T>, owner: &str) -> Result<T, CliError> {
    value.ok_or_else(|| invalid(field, format!("required for {owner}")))
}

impl RunConfig {
    /// Parses a TOML document.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(e.to_string()))
    }

    /// Reads and parses a file, applying dotted `section.key` overrides first.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse_with_overrides(&text, overrides)
    }

    /// Parses `text` after setting each `section.key` to the given raw value.
    /// Values are read as TOML scalars when possible and as strings otherwise.
    pub fn parse_with_overrides(
        text: &str,
        overrides: &[(String, String)],
    ) -> Result<Self, CliError> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Validation(e.to_string()))?;
        for (path, raw) in overrides {
            let (section, key) = path
                .split_once('.')
                .filter(|(s, k)| !s.is_empty() && !k.is_empty() && !k.contains('.'))
                .ok_or_else(|| invalid(path, "overrides take the form --section.key value"))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.clone()));
            let table = doc
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| invalid(section, "is not a section"))?;
            table.insert(key.to_string(), value);
        }
        doc.try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(e.to_string()))
    }

    /// Fills every default, checks that method- and optimizer-specific
    /// fields appear exactly when required, and validates the result.
    pub fn resolve(&self) -> Result<Self, CliError> {
        let mut out = self.clone();
        let m = &mut out.method;
        let name = m.name.clone().unwrap_or_else(|| "mhpo".into());
        match name.as_str() {
            "mhpo" => {
                for (f, v) in [
                    ("method.eps", m.eps),
                    ("method.eps_low", m.eps_low),
                    ("method.eps_high", m.eps_high),
                ] {
                    forbid(f, &v, "dapo_clip/grpo_clip")?;
                }
                let (lfm, dhp) = (LfmParams::default(), DhpParams::default());
                m.c.get_or_insert(lfm.c());
                m.k_pos.get_or_insert(dhp.k_pos());
                m.lambda_pos.get_or_insert(dhp.lambda_pos());
                m.k_neg.get_or_insert(dhp.k_neg());
                m.lambda_neg.get_or_insert(dhp.lambda_neg());
            }
            "grpo_clip" | "dapo_clip" | "naive_pg" => {
                for (f, v) in [
                    ("method.c", m.c),
                    ("method.k_pos", m.k_pos),
                    ("method.lambda_pos", m.lambda_pos),
                    ("method.k_neg", m.k_neg),
                    ("method.lambda_neg", m.lambda_neg),
                ] {
                    forbid(f, &v, "mhpo")?;
                }
                match name.as_str() {
                    "grpo_clip" => {
                        require("method.eps", m.eps, "grpo_clip")?;
                        forbid("method.eps_low", &m.eps_low, "dapo_clip")?;
                        forbid("method.eps_high", &m.eps_high, "dapo_clip")?;
                    }
                    "dapo_clip" => {
                        require("method.eps_low", m.eps_low, "dapo_clip")?;
                        require("method.eps_high", m.eps_high, "dapo_clip")?;
                        forbid("method.eps", &m.eps, "grpo_clip")?;
                    }
                    _ => {
                        forbid("method.eps", &m.eps, "grpo_clip")?;
                        forbid("method.eps_low", &m.eps_low, "dapo_clip")?;
                        forbid("method.eps_high", &m.eps_high, "dapo_clip")?;
                    }
                }
            }
            other => return Err(invalid("method.name", format!("unknown method {other:?}"))),
        }
        m.name = Some(name);

        let e = &mut out.env;
        let kind = e.kind.clone().unwrap_or_else(|| "parity".into());
        match kind.as_str() {
            "bandit" => {
                require("env.arms", e.arms, "bandit")?;
            }
            "parity" | "digit_sum" => forbid("env.arms", &e.arms, "bandit")?,
            other => {
                return Err(invalid(
                    "env.kind",
                    format!("unknown environment {other:?}"),
                ))
            }
        }
        e.kind = Some(kind);
        e.num_prompts.get_or_insert(16);
        e.order.get_or_insert(2);
        e.max_len.get_or_insert(16);

        let t = &mut out.train;
        let optimizer = t.optimizer.clone().unwrap_or_else(|| "sgd".into());
        match optimizer.as_str() {
            "sgd" => {
                for (f, v) in [
                    ("train.beta1", t.beta1),
                    ("train.beta2", t.beta2),
                    ("train.epsilon_hat", t.epsilon_hat),
                ] {
                    forbid(f, &v, "adaptive_moment")?;
                }
                t.learning_rate.get_or_insert(0.05);
            }
            "adaptive_moment" => {
                let OptimizerKind::AdaptiveMoment {
                    beta1,
                    beta2,
                    epsilon_hat,
                } = OptimizerKind::adaptive_default()
                else {
                    unreachable!()
                };
                t.beta1.get_or_insert(beta1);
                t.beta2.get_or_insert(beta2);
                t.epsilon_hat.get_or_insert(epsilon_hat);
                t.learning_rate.get_or_insert(0.01);
            }
            other => {
                return Err(invalid(
                    "train.optimizer",
                    format!("unknown optimizer {other:?}"),
                ))
            }
        }
        t.optimizer = Some(optimizer);
        t.group_size.get_or_insert(8);
        t.prompts_per_batch.get_or_insert(16);
        t.updates_per_rollout.get_or_insert(4);
        t.total_steps.get_or_insert(500);
        t.eval_every.get_or_insert(10);
        t.seed.get_or_insert(0);
        t.degeneracy_tol
            .get_or_insert(mhpo_core::advantage::DEFAULT_DEGENERACY_TOL);

        let label = out
            .report
            .label
            .clone()
            .unwrap_or_else(|| out.method.name.clone().unwrap_or_default());
        out.report.label = Some(label);
        out.train_config()?;
        Ok(out)
    }

    /// Converts a resolved config into the trainer's configuration.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let core_err = |e: mhpo_core::Error| CliError::Validation(e.to_string());
        let m = &self.method;
        let method = match m.name.as_deref().unwrap_or("mhpo") {
            "mhpo" => MethodConfig::Mhpo {
                lfm: LfmParams::new(require("method.c", m.c, "mhpo")?)
                    .map_err(|e| invalid("method.c", e))?,
                dhp: DhpParams::new(
                    require("method.k_pos", m.k_pos, "mhpo")?,
                    require("method.lambda_pos", m.lambda_pos, "mhpo")?,
                    require("method.k_neg", m.k_neg, "mhpo")?,
                    require("method.lambda_neg", m.lambda_neg, "mhpo")?,
                )
                .map_err(|e| invalid("method.k_pos/lambda_pos/k_neg/lambda_neg", e))?,
            },
            "grpo_clip" => MethodConfig::grpo_clip(require("method.eps", m.eps, "grpo_clip")?)
                .map_err(core_err)?,
            "dapo_clip" => MethodConfig::dapo_clip(
                require("method.eps_low", m.eps_low, "dapo_clip")?,
                require("method.eps_high", m.eps_high, "dapo_clip")?,
            )
            .map_err(core_err)?,
            _ => MethodConfig::NaivePg,
        };
        let e = &self.env;
        let kind = match e.kind.as_deref().unwrap_or("parity") {
            "bandit" => EnvKind::Bandit {
                arms: require("env.arms", e.arms, "bandit")?,
            },
            "digit_sum" => EnvKind::DigitSum,
            _ => EnvKind::Parity,
        };
        let env = EnvSpec::new(
            kind,
            require("env.num_prompts", e.num_prompts, "every run")?,
        )
        .map_err(core_err)?;
        let t = &self.train;
        let optimizer = match t.optimizer.as_deref().unwrap_or("sgd") {
            "adaptive_moment" => OptimizerKind::AdaptiveMoment {
                beta1: require("train.beta1", t.beta1, "adaptive_moment")?,
                beta2: require("train.beta2", t.beta2, "adaptive_moment")?,
                epsilon_hat: require("train.epsilon_hat", t.epsilon_hat, "adaptive_moment")?,
            },
            _ => OptimizerKind::Sgd,
        };
        let need = |f: &str| invalid(f, "missing (resolve the config first)");
        let cfg = TrainConfig {
            method,
            env,
            order: e.order.ok_or_else(|| need("env.order"))?,
            max_len: e.max_len.ok_or_else(|| need("env.max_len"))?,
            group_size: t.group_size.ok_or_else(|| need("train.group_size"))?,
            prompts_per_batch: t
                .prompts_per_batch
                .ok_or_else(|| need("train.prompts_per_batch"))?,
            updates_per_rollout: t
                .updates_per_rollout
                .ok_or_else(|| need("train.updates_per_rollout"))?,
            optimizer,
            learning_rate: t.learning_rate.ok_or_else(|| need("train.learning_rate"))?,
            total_steps: t.total_steps.ok_or_else(|| need("train.total_steps"))?,
            eval_every: t.eval_every.ok_or_else(|| need("train.eval_every"))?,
            seed: t.seed.ok_or_else(|| need("train.seed"))?,
            degeneracy_tol: t
                .degeneracy_tol
                .ok_or_else(|| need("train.degeneracy_tol"))?,
        };
        cfg.validate().map_err(core_err)?;
        Ok(cfg)
    }

    /// Resolved document as TOML text.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config sections serialize as plain tables")
    }

    /// Label used in reports.
    pub fn label(&self) -> String {
        self.report
            .label
            .clone()
            .or_else(|| self.method.name.clone())
            .unwrap_or_else(|| "mhpo".into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err(text: &str) -> String {
        match RunConfig::parse(text).and_then(|c| c.resolve()) {
            Err(CliError::Validation(msg)) => msg,
            other => panic!("expected a validation error, got {other:?}"),
        }
    }

    #[test]
    fn empty_document_resolves_to_reference_defaults() {
        let cfg = RunConfig::parse("").unwrap().resolve().unwrap();
        let tc = cfg.train_config().unwrap();
        let env = EnvSpec::new(EnvKind::Parity, 16).unwrap();
        assert_eq!(tc, TrainConfig::toy(MethodConfig::mhpo_default(), env));
        assert_eq!(cfg.label(), "mhpo");
    }

    #[test]
    fn resolved_config_round_trips() {
        for text in [
            "",
            "[method]\nname = \"grpo_clip\"\neps = 0.2\n[train]\noptimizer = \"adaptive_moment\"\n",
            "[method]\nname = \"dapo_clip\"\neps_low = 0.2\neps_high = 0.28\n[env]\nkind = \"bandit\"\narms = 3\n",
            "[method]\nname = \"naive_pg\"\n[report]\nlabel = \"control\"\n",
        ] {
            let resolved = RunConfig::parse(text).unwrap().resolve().unwrap();
            let again = RunConfig::parse(&resolved.to_toml()).unwrap();
            assert_eq!(again, resolved);
            assert_eq!(again.resolve().unwrap(), resolved);
        }
    }

    #[test]
    fn missing_and_foreign_fields_are_named() {
        assert!(err("[method]\nname = \"grpo_clip\"\n").contains("method.eps"));
        assert!(err("[method]\nname = \"dapo_clip\"\neps_low = 0.2\n").contains("method.eps_high"));
        assert!(err("[method]\nname = \"mhpo\"\neps = 0.2\n").contains("method.eps"));
        assert!(err("[method]\nname = \"grpo_clip\"\neps = 0.2\nc = 1.0\n").contains("method.c"));
        assert!(err("[env]\nkind = \"bandit\"\n").contains("env.arms"));
        assert!(err("[train]\nbeta1 = 0.9\n").contains("train.beta1"));
        assert!(err("[method]\nname = \"grpo_clip\"\neps = 1.5\n").contains("method.eps"));
        assert!(err("[train]\ngroup_size = 1\n").contains("train.group_size"));
        assert!(err("[method]\nc = -1.0\n").contains("method.c"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(err("[method]\ncc = 1.0\n").contains("cc"));
        assert!(err("[extra]\nx = 1\n").contains("extra"));
    }

    #[test]
    fn dotted_overrides() {
        let o = |k: &str, v: &str| (k.to_string(), v.to_string());
        let cfg = RunConfig::parse_with_overrides(
            "[method]\nc = 1.0\n",
            &[
                o("method.c", "2.0"),
                o("train.seed", "7"),
                o("env.kind", "digit_sum"),
                o("method.k_pos", "2"),
            ],
        )
        .unwrap()
        .resolve()
        .unwrap();
        assert_eq!(cfg.method.c, Some(2.0));
        assert_eq!(cfg.method.k_pos, Some(2.0));
        assert_eq!(cfg.train.seed, Some(7));
        assert_eq!(cfg.env.kind.as_deref(), Some("digit_sum"));
        assert!(cfg.to_toml().contains("c = 2.0"));
        assert!(RunConfig::parse_with_overrides("", &[o("seed", "1")]).is_err());
        assert!(RunConfig::parse_with_overrides("", &[o("method.unknown", "1")]).is_err());
    }
}
