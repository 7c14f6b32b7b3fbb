//! On-disk formats of a run directory.
//!
//! ```text
//! <run>/config.resolved   resolved TOML configuration
//! <run>/log.csv           one row per step
//! <run>/summary.json      best/latest evaluation, Δ, incidents, assumptions
//! <run>/ckpt.best         parameters of the best evaluated step
//! <run>/ckpt.latest       parameters after the final step
//! <run>/incidents.log     one line per aborted step
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mhpo_core::policy::{ContextKey, PolicyParams, PolicyShape};
use mhpo_core::trainer::{Checkpoint, Incident, StepRecord};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// File names inside a run directory.
pub const CONFIG_FILE: &str = "config.resolved";
/// Step log.
pub const LOG_FILE: &str = "log.csv";
/// Run summary.
pub const SUMMARY_FILE: &str = "summary.json";
/// Best checkpoint.
pub const BEST_FILE: &str = "ckpt.best";
/// Final checkpoint.
pub const LATEST_FILE: &str = "ckpt.latest";
/// Incident log.
pub const INCIDENTS_FILE: &str = "incidents.log";

/// Columns of `log.csv`, version 1. Readers accept extra trailing columns.
pub const LOG_HEADER: [&str; 10] = [
    "step",
    "mean_reward",
    "loss",
    "grad_norm",
    "max_multiplier",
    "ratio_min",
    "ratio_med",
    "ratio_max",
    "degenerate_groups",
    "eval_success",
];

/// One parsed row of `log.csv`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct LogRow {
    /// Step index, starting at 1.
    pub step: u64,
    /// Mean reward of the rollout batch.
    pub mean_reward: f64,
    /// Mean surrogate loss over the inner updates.
    pub loss: f64,
    /// Largest gradient L2 norm over the inner updates.
    pub grad_norm: f64,
    /// Largest per-token gradient coefficient.
    pub max_multiplier: f64,
    /// Smallest importance ratio seen.
    pub ratio_min: f64,
    /// Median importance ratio.
    pub ratio_med: f64,
    /// Largest importance ratio seen.
    pub ratio_max: f64,
    /// Groups whose rewards were all equal.
    pub degenerate_groups: usize,
    /// Greedy success, present on evaluation steps only.
    pub eval_success: Option<f64>,
}

/// Shortest round-trip representation, switching to exponent form for very
/// large or small magnitudes.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

/// Serializes the step log. Floats use the shortest representation that
/// reads back to the same value, so the bytes are a pure function of the log.
pub fn log_csv(records: &[StepRecord]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LOG_HEADER)?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            num(r.mean_reward),
            num(r.loss),
            num(r.grad_norm),
            num(r.max_multiplier),
            num(r.ratio_min),
            num(r.ratio_med),
            num(r.ratio_max),
            r.degenerate_groups.to_string(),
            r.eval_success.map(num).unwrap_or_default(),
        ])?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

/// Parses a step log. A trailing line without a newline is treated as still
/// being written and skipped; columns beyond the known ones are ignored.
pub fn parse_log(text: &str) -> Result<Vec<LogRow>, CliError> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(complete.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers
        .iter()
        .take(LOG_HEADER.len())
        .ne(LOG_HEADER.iter().copied())
    {
        return Err(CliError::Io(format!(
            "unexpected log header: {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    rdr.deserialize()
        .map(|r| r.map_err(CliError::from))
        .collect()
}

/// Reads `log.csv` from a run directory.
pub fn read_log(dir: &Path) -> Result<Vec<LogRow>, CliError> {
    let path = dir.join(LOG_FILE);
    let text =
        fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_log(&text)
}

const CHECKPOINT_MAGIC: &str = "mhpo-checkpoint 1";

/// Flat key-value checkpoint: a version line, header keys, then one
/// `row.<prompt>.<ctx0>-<ctx1>... = <logits>` line per materialized row.
/// Unlisted rows are uniform.
pub fn checkpoint_text(ckpt: &Checkpoint) -> String {
    let shape = ckpt.params.shape();
    let mut s = String::new();
    let _ = writeln!(s, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(s, "vocab_size = {}", shape.vocab_size);
    let _ = writeln!(s, "order = {}", shape.order);
    let _ = writeln!(s, "max_len = {}", shape.max_len);
    let _ = writeln!(s, "step = {}", ckpt.step);
    let _ = writeln!(s, "eval_success = {}", num(ckpt.eval_success));
    let _ = writeln!(s, "rows = {}", ckpt.params.num_rows());
    for (key, logits) in ckpt.params.rows() {
        let ctx: Vec<String> = key.context.iter().map(u32::to_string).collect();
        let vals: Vec<String> = logits.iter().map(|&x| num(x)).collect();
        let _ = writeln!(
            s,
            "row.{}.{} = {}",
            key.prompt,
            ctx.join("-"),
            vals.join(" ")
        );
    }
    s
}

fn bad(line: usize, what: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("checkpoint line {line}: {what}"))
}

/// Parses [`checkpoint_text`] output.
pub fn parse_checkpoint(text: &str) -> Result<Checkpoint, CliError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == CHECKPOINT_MAGIC => {}
        _ => return Err(bad(1, format!("expected header {CHECKPOINT_MAGIC:?}"))),
    }
    let mut header = std::collections::BTreeMap::new();
    let mut rows = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| bad(n, "expected `key = value`"))?;
        if let Some(addr) = k.strip_prefix("row.") {
            let (prompt, ctx) = addr
                .split_once('.')
                .ok_or_else(|| bad(n, "row key needs prompt and context"))?;
            let prompt: u32 = prompt.parse().map_err(|e| bad(n, e))?;
            let context = if ctx.is_empty() {
                Vec::new()
            } else {
                ctx.split('-')
                    .map(|t| t.parse::<u32>().map_err(|e| bad(n, e)))
                    .collect::<Result<_, _>>()?
            };
            let logits = v
                .split(' ')
                .map(|t| t.parse::<f64>().map_err(|e| bad(n, e)))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push((n, ContextKey { prompt, context }, logits));
        } else {
            header.insert(k.to_string(), (n, v.to_string()));
        }
    }
    let get = |k: &str| -> Result<&str, CliError> {
        header
            .get(k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| CliError::Io(format!("checkpoint is missing `{k}`")))
    };
    let int = |k: &str| -> Result<usize, CliError> {
        get(k)?
            .parse()
            .map_err(|e| CliError::Io(format!("{k}: {e}")))
    };
    let shape = PolicyShape::new(int("vocab_size")?, int("order")?, int("max_len")?)
        .map_err(|e| CliError::Io(e.to_string()))?;
    if int("rows")? != rows.len() {
        return Err(CliError::Io(format!(
            "checkpoint declares {} rows, found {}",
            int("rows")?,
            rows.len()
        )));
    }
    let mut params = PolicyParams::uniform(shape);
    for (n, key, logits) in rows {
        params.set_row(key, logits).map_err(|e| bad(n, e))?;
    }
    Ok(Checkpoint {
        step: get("step")?
            .parse()
            .map_err(|e| CliError::Io(format!("step: {e}")))?,
        eval_success: get("eval_success")?
            .parse()
            .map_err(|e| CliError::Io(format!("eval_success: {e}")))?,
        params,
    })
}

/// Evaluation of one checkpoint in the summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Step of the checkpoint.
    pub step: u64,
    /// Greedy success rate.
    pub eval_success: f64,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Report label.
    pub label: String,
    /// Objective identifier.
    pub method: String,
    /// Environment identifier.
    pub env: String,
    /// Run seed.
    pub seed: u64,
    /// Completed steps.
    pub steps: u64,
    /// Best evaluated checkpoint.
    pub best: EvalPoint,
    /// Final checkpoint.
    pub latest: EvalPoint,
    /// `latest - best` greedy success.
    pub delta: f64,
    /// Aborted steps.
    pub incidents: usize,
    /// Responses scored as malformed over the run.
    pub malformed_responses: usize,
    /// Modelling choices recorded with every run.
    pub assumptions: Vec<String>,
}

/// Assumptions recorded in every summary.
pub fn run_assumptions(degeneracy_tol: f64, updates_per_rollout: usize) -> Vec<String> {
    vec![
        "advantage: population standard deviation (divide by K)".into(),
        format!("advantage: groups with std < {degeneracy_tol:e} get zero advantages"),
        "loss: token mean per response, mean over non-empty responses in the batch".into(),
        "loss: penalty term held constant during differentiation (semi-gradient)".into(),
        "clip ties: unclipped branch active".into(),
        format!(
            "ratio drift: {updates_per_rollout} updates per rollout batch against a fixed snapshot"
        ),
        "forced end-of-sequence at max_len carries no credit".into(),
    ]
}

/// Formats incidents, one per line.
pub fn incidents_text(incidents: &[Incident]) -> String {
    incidents
        .iter()
        .map(|i| {
            format!(
                "step {} inner_update {}: {}\n",
                i.step, i.inner_update, i.reason
            )
        })
        .collect()
}

/// Writes `bytes` to `dir/name`.
pub fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Reads `summary.json` from a run directory.
pub fn read_summary(dir: &Path) -> Result<Summary, CliError> {
    let path = dir.join(SUMMARY_FILE);
    let text =
        fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64, eval: Option<f64>) -> StepRecord {
        StepRecord {
            step,
            mean_reward: 0.5,
            loss: -0.125,
            grad_norm: 0.1 + step as f64 * 1e-3,
            max_multiplier: 0.265,
            ratio_min: 0.9,
            ratio_med: 1.0,
            ratio_max: 1.1,
            degenerate_groups: 3,
            eval_success: eval,
            malformed: 0,
            incident: None,
        }
    }

    #[test]
    fn log_round_trip_and_blank_eval() {
        let recs = [record(1, None), record(2, Some(0.75))];
        let bytes = log_csv(&recs).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text.lines().next().unwrap(), LOG_HEADER.join(","));
        assert!(text.lines().nth(1).unwrap().ends_with(",3,"));
        let rows = parse_log(&text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].eval_success, None);
        assert_eq!(rows[1].eval_success, Some(0.75));
        assert_eq!(rows[1].grad_norm, recs[1].grad_norm);
    }

    #[test]
    fn log_reader_tolerates_extra_columns_and_partial_lines() {
        let text = format!(
            "{},extra\n1,0.5,0,0.1,0.2,1,1,1,0,,x\n2,0.5,0,0.1,0.2,1,1,1,0,1,y\n3,0.5",
            LOG_HEADER.join(",")
        );
        let rows = parse_log(&text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].eval_success, Some(1.0));
        assert!(parse_log("a,b\n1,2\n").is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let shape = PolicyShape::new(3, 2, 16).unwrap();
        let mut params = PolicyParams::uniform(shape);
        params
            .set_row(shape.context_key(4, &[1]), vec![0.1, -1.0 / 3.0, 1e-300])
            .unwrap();
        params
            .set_row(shape.context_key(0, &[]), vec![f64::MAX, -0.0, 2.5])
            .unwrap();
        let ckpt = Checkpoint {
            step: 40,
            eval_success: 0.9375,
            params,
        };
        let text = checkpoint_text(&ckpt);
        assert!(text.starts_with("mhpo-checkpoint 1\n"));
        let back = parse_checkpoint(&text).unwrap();
        assert_eq!(back.step, 40);
        assert_eq!(back.eval_success, 0.9375);
        let bits = |p: &PolicyParams| {
            p.rows()
                .map(|(k, r)| (k.clone(), r.iter().map(|x| x.to_bits()).collect::<Vec<_>>()))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&back.params), bits(&ckpt.params));
        assert_eq!(checkpoint_text(&back), text);
    }

    #[test]
    fn checkpoint_rejects_damage() {
        let shape = PolicyShape::new(3, 1, 4).unwrap();
        let ckpt = Checkpoint {
            step: 1,
            eval_success: 0.0,
            params: PolicyParams::uniform(shape),
        };
        let text = checkpoint_text(&ckpt);
        assert!(parse_checkpoint(&text.replace("mhpo-checkpoint 1", "v0")).is_err());
        assert!(parse_checkpoint(&text.replace("rows = 0", "rows = 1")).is_err());
        let extra = format!("{text}row.0.3 = 1 2\n");
        assert!(parse_checkpoint(&extra.replace("rows = 0", "rows = 1")).is_err());
    }
}
