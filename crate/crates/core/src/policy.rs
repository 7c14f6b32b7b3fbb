//! Order-`m` Markov categorical policy stored as a table of logit rows.
//!
//! A row is addressed by the prompt id and the last `m` response tokens
//! (left-padded with a begin sentinel). Rows that were never written behave
//! as all-zero logits, i.e. the uniform distribution.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Token index. The end-of-sequence token is `vocab_size - 1`.
pub type Token = u32;

/// Address of one logit row.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContextKey {
    /// Prompt the response answers.
    pub prompt: u32,
    /// Exactly `order` previous tokens; positions before the response start
    /// hold the begin sentinel (`vocab_size`).
    pub context: Vec<Token>,
}

/// Dimensions of a policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyShape {
    /// Vocabulary size including end-of-sequence.
    pub vocab_size: usize,
    /// Number of previous tokens in the conditioning context.
    pub order: usize,
    /// Maximum response length; end-of-sequence is forced at this length.
    pub max_len: usize,
}

impl PolicyShape {
    /// Validates `vocab_size >= 2` and `max_len >= 1`.
    pub fn new(vocab_size: usize, order: usize, max_len: usize) -> Result<Self> {
        if vocab_size < 2 || vocab_size > u32::MAX as usize - 1 {
            return Err(Error::config(
                "env.vocab_size",
                alloc::format!("must be at least 2, got {vocab_size}"),
            ));
        }
        if max_len == 0 {
            return Err(Error::config("env.max_len", "must be at least 1"));
        }
        Ok(Self {
            vocab_size,
            order,
            max_len,
        })
    }

    /// End-of-sequence token.
    pub fn eos(&self) -> Token {
        (self.vocab_size - 1) as Token
    }

    /// Padding sentinel used in contexts; never emitted.
    pub fn bos(&self) -> Token {
        self.vocab_size as Token
    }

    /// Row address for the next token after `prefix`.
    pub fn context_key(&self, prompt: u32, prefix: &[Token]) -> ContextKey {
        let mut context = vec![self.bos(); self.order];
        let take = prefix.len().min(self.order);
        context[self.order - take..].copy_from_slice(&prefix[prefix.len() - take..]);
        ContextKey { prompt, context }
    }
}

/// Logit table.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: PolicyShape,
    rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl PolicyParams {
    /// Policy with every row uniform.
    pub fn uniform(shape: PolicyShape) -> Self {
        Self {
            shape,
            rows: BTreeMap::new(),
        }
    }

    /// Dimensions.
    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    /// Deep copy used as the behaviour policy for a rollout phase.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    /// Stored rows in key order.
    pub fn rows(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Number of materialized rows.
    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Logits of a row, or `None` for a row never written.
    pub fn row(&self, key: &ContextKey) -> Option<&[f64]> {
        self.rows.get(key).map(Vec::as_slice)
    }

    /// Mutable row, materialized as zeros on first access.
    pub fn row_mut(&mut self, key: &ContextKey) -> &mut [f64] {
        let v = self.shape.vocab_size;
        self.rows.entry(key.clone()).or_insert_with(|| vec![0.0; v])
    }

    /// Replaces a row; logits must be finite and have length `vocab_size`.
    pub fn set_row(&mut self, key: ContextKey, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.shape.vocab_size {
            return Err(Error::config(
                "policy.row",
                alloc::format!(
                    "expected {} logits, got {}",
                    self.shape.vocab_size,
                    logits.len()
                ),
            ));
        }
        if key.context.len() != self.shape.order {
            return Err(Error::config(
                "policy.row",
                "context length differs from the policy order",
            ));
        }
        if let Some(&bad) = logits.iter().find(|x| !x.is_finite()) {
            return Err(Error::domain("logit", bad));
        }
        self.rows.insert(key, logits);
        Ok(())
    }

    /// Log-probabilities of every token at `key` (max-subtracted log-sum-exp).
    pub fn log_probs(&self, key: &ContextKey) -> Vec<f64> {
        match self.rows.get(key) {
            Some(row) => log_softmax(row),
            None => vec![-libm::log(self.shape.vocab_size as f64); self.shape.vocab_size],
        }
    }

    /// Probabilities at `key`.
    pub fn probs(&self, key: &ContextKey) -> Vec<f64> {
        self.log_probs(key).into_iter().map(libm::exp).collect()
    }

    /// `log π(token | key)`.
    pub fn logprob_at(&self, key: &ContextKey, token: Token) -> f64 {
        match self.rows.get(key) {
            Some(row) => log_softmax_at(row, token as usize),
            None => -libm::log(self.shape.vocab_size as f64),
        }
    }

    /// `log π(token | prompt, prefix)`.
    pub fn token_logprob(&self, prompt: u32, prefix: &[Token], token: Token) -> Result<f64> {
        self.check_token(token)?;
        Ok(self.logprob_at(&self.shape.context_key(prompt, prefix), token))
    }

    /// Gradient of `log π(token | key)` with respect to the row's logits:
    /// `onehot(token) - softmax(row)`.
    pub fn score(&self, key: &ContextKey, token: Token) -> Vec<f64> {
        let mut g: Vec<f64> = self.probs(key).into_iter().map(|p| -p).collect();
        g[token as usize] += 1.0;
        g
    }

    /// Per-token score vectors of `response` (one entry per token).
    pub fn score_gradient(&self, prompt: u32, response: &[Token]) -> Result<Vec<TokenScore>> {
        response
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                self.check_token(tok)?;
                let key = self.shape.context_key(prompt, &response[..t]);
                let grad = self.score(&key, tok);
                Ok(TokenScore { key, grad })
            })
            .collect()
    }

    /// True when every stored logit is finite.
    pub fn is_finite(&self) -> bool {
        self.rows.values().flatten().all(|x| x.is_finite())
    }

    /// Most likely token at `key`; ties go to the lowest index.
    pub fn greedy_token(&self, key: &ContextKey) -> Token {
        match self.rows.get(key) {
            Some(row) => {
                let mut best = 0;
                for (i, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = i;
                    }
                }
                best as Token
            }
            None => 0,
        }
    }

    fn check_token(&self, token: Token) -> Result<()> {
        if token as usize >= self.shape.vocab_size {
            return Err(Error::domain("token", token as f64));
        }
        Ok(())
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(row.iter().map(|x| libm::exp(x - max)).sum::<f64>())
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|x| x - lse).collect()
}

fn log_softmax_at(row: &[f64], i: usize) -> f64 {
    row[i] - log_sum_exp(row)
}

/// Score vector of one token, living on one row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScore {
    /// Row the gradient lives on.
    pub key: ContextKey,
    /// `onehot(token) - softmax(row)`.
    pub grad: Vec<f64>,
}

/// Sparse parameter-space vector: only touched rows are stored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl Gradient {
    /// Empty (zero) vector.
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `scale · values` to the row at `key`.
    pub fn add_scaled(&mut self, key: &ContextKey, values: &[f64], scale: f64) {
        let row = self
            .rows
            .entry(key.clone())
            .or_insert_with(|| vec![0.0; values.len()]);
        for (r, v) in row.iter_mut().zip(values) {
            *r += scale * v;
        }
    }

    /// Stored rows in key order.
    pub fn rows(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Row at `key`, if touched.
    pub fn row(&self, key: &ContextKey) -> Option<&[f64]> {
        self.rows.get(key).map(Vec::as_slice)
    }

    /// Euclidean norm over all entries.
    pub fn norm_l2(&self) -> f64 {
        libm::sqrt(self.rows.values().flatten().map(|x| x * x).sum())
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.rows.values().flatten().all(|x| x.is_finite())
    }

    /// True when no row has been touched.
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}
