//! Group sampling from a frozen behaviour policy.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{EnvSpec, Verdict};
use crate::policy::{ContextKey, PolicyParams, Token};
use crate::{Error, Result};

/// Coordinates of a random stream: every `(seed, step, slot, index)` tuple
/// gets its own generator, so sampling order does not matter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutSeed {
    /// Run seed.
    pub seed: u64,
    /// Training step.
    pub step: u64,
    /// Position of the group within the batch.
    pub slot: u64,
}

/// Independent generator for `(coords, index)`.
pub fn stream_rng(coords: RolloutSeed, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(coords.seed);
    rng.set_stream(mix(mix(mix(0x6d68_706f, coords.step), coords.slot), index));
    rng
}

// splitmix64 finalizer over a running hash
fn mix(h: u64, v: u64) -> u64 {
    let mut z = h ^ v
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(h << 6)
        .wrapping_add(h >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    /// Full token sequence including the final end-of-sequence token.
    pub tokens: Vec<Token>,
    /// Row address of every policy-chosen token.
    pub contexts: Vec<ContextKey>,
    /// `log π_old` of every policy-chosen token, recorded at sampling time.
    pub old_logprobs: Vec<f64>,
    /// True when end-of-sequence was appended at the length limit instead of
    /// being sampled; that token carries no credit.
    pub forced_eos: bool,
}

impl Response {
    /// Number of policy-chosen tokens, `T_i`.
    pub fn policy_len(&self) -> usize {
        self.old_logprobs.len()
    }

    /// Policy-chosen tokens.
    pub fn policy_tokens(&self) -> &[Token] {
        &self.tokens[..self.policy_len()]
    }
}

/// `K` responses to one prompt with their rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    /// Prompt id.
    pub prompt_id: u32,
    /// Sampled responses.
    pub responses: Vec<Response>,
    /// Binary reward per response.
    pub rewards: Vec<f64>,
    /// Responses the environment rejected as malformed.
    pub malformed: usize,
}

/// Ancestral sample of one response.
pub fn sample_response<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: u32,
    rng: &mut R,
) -> Response {
    let shape = params.shape();
    let eos = shape.eos();
    let mut tokens = Vec::new();
    let mut contexts = Vec::new();
    let mut old_logprobs = Vec::new();
    loop {
        if tokens.len() + 1 >= shape.max_len {
            tokens.push(eos);
            return Response {
                tokens,
                contexts,
                old_logprobs,
                forced_eos: true,
            };
        }
        let key = shape.context_key(prompt, &tokens);
        let logp = params.log_probs(&key);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut tok = logp.len() - 1;
        for (i, lp) in logp.iter().enumerate() {
            acc += libm::exp(*lp);
            if u < acc {
                tok = i;
                break;
            }
        }
        let tok = tok as Token;
        tokens.push(tok);
        contexts.push(key);
        old_logprobs.push(logp[tok as usize]);
        if tok == eos {
            return Response {
                tokens,
                contexts,
                old_logprobs,
                forced_eos: false,
            };
        }
    }
}

/// Samples `k` responses to `prompt` from `params` and scores them.
/// Deterministic in `seed`.
pub fn sample_group(
    params: &PolicyParams,
    env: &EnvSpec,
    prompt: u32,
    k: usize,
    seed: RolloutSeed,
) -> Result<RolloutGroup> {
    if k < 2 {
        return Err(Error::config(
            "train.group_size",
            alloc::format!("must be at least 2, got {k}"),
        ));
    }
    if params.shape().vocab_size != env.vocab_size() {
        return Err(Error::config(
            "env.vocab_size",
            "policy vocabulary does not match the environment",
        ));
    }
    let mut responses = Vec::with_capacity(k);
    let mut rewards = Vec::with_capacity(k);
    let mut malformed = 0;
    for i in 0..k {
        let mut rng = stream_rng(seed, i as u64);
        let resp = sample_response(params, prompt, &mut rng);
        let verdict = env.verify(prompt, &resp.tokens);
        if verdict == Verdict::Malformed {
            malformed += 1;
        }
        rewards.push(verdict.reward());
        responses.push(resp);
    }
    Ok(RolloutGroup {
        prompt_id: prompt,
        responses,
        rewards,
        malformed,
    })
}

/// Greedy (argmax) decode of one prompt.
pub fn greedy_response(params: &PolicyParams, prompt: u32) -> Vec<Token> {
    let shape = params.shape();
    let eos = shape.eos();
    let mut tokens = Vec::new();
    while tokens.len() + 1 < shape.max_len {
        let tok = params.greedy_token(&shape.context_key(prompt, &tokens));
        tokens.push(tok);
        if tok == eos {
            return tokens;
        }
    }
    tokens.push(eos);
    tokens
}
