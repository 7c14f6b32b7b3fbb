//! Rule-verified reward environments.
//!
//! Every task answers prompt `p` with a token sequence terminated by the
//! end-of-sequence token and scores it 0 or 1:
//!
//! - `bandit`: tokens `0..arms` are arms; correct iff the first token is the
//!   prompt's arm, `p mod arms`.
//! - `parity`: tokens `0`, `1`; correct iff the number of `1`s has the
//!   parity demanded by the prompt (even for even `p`).
//! - `digit_sum`: tokens `0..=9` are digits; correct iff the digit sum is
//!   congruent to `p mod 10`.

use crate::policy::{PolicyShape, Token};
use crate::{Error, Result};

/// Task family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    /// One-token answer over `arms` choices.
    Bandit {
        /// Number of arms.
        arms: u32,
    },
    /// Binary string with a prescribed parity of ones.
    Parity,
    /// Digit string with a prescribed digit sum modulo 10.
    DigitSum,
}

impl EnvKind {
    /// Identifier used in configs.
    pub fn name(&self) -> &'static str {
        match self {
            EnvKind::Bandit { .. } => "bandit",
            EnvKind::Parity => "parity",
            EnvKind::DigitSum => "digit_sum",
        }
    }
}

/// A task together with its prompt set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvSpec {
    /// Task family.
    pub kind: EnvKind,
    /// Prompt ids are `0..num_prompts`.
    pub num_prompts: u32,
}

/// Outcome of checking one response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// Well formed and correct.
    Correct,
    /// Well formed and wrong.
    Incorrect,
    /// Not a terminated sequence over the task's vocabulary.
    Malformed,
}

impl Verdict {
    /// Binary reward.
    pub fn reward(self) -> f64 {
        match self {
            Verdict::Correct => 1.0,
            Verdict::Incorrect | Verdict::Malformed => 0.0,
        }
    }
}

impl EnvSpec {
    /// Validates the prompt count and arm count.
    pub fn new(kind: EnvKind, num_prompts: u32) -> Result<Self> {
        if num_prompts == 0 {
            return Err(Error::config("env.num_prompts", "must be at least 1"));
        }
        if let EnvKind::Bandit { arms } = kind {
            if arms < 1 {
                return Err(Error::config("env.arms", "must be at least 1"));
            }
        }
        Ok(Self { kind, num_prompts })
    }

    /// Vocabulary size including end-of-sequence.
    pub fn vocab_size(&self) -> usize {
        match self.kind {
            EnvKind::Bandit { arms } => arms as usize + 1,
            EnvKind::Parity => 3,
            EnvKind::DigitSum => 11,
        }
    }

    /// Policy dimensions for this task.
    pub fn policy_shape(&self, order: usize, max_len: usize) -> Result<PolicyShape> {
        PolicyShape::new(self.vocab_size(), order, max_len)
    }

    fn eos(&self) -> Token {
        (self.vocab_size() - 1) as Token
    }

    /// Scores `response`, which must end with (and only contain one)
    /// end-of-sequence token.
    pub fn verify(&self, prompt: u32, response: &[Token]) -> Verdict {
        let eos = self.eos();
        let Some((&last, body)) = response.split_last() else {
            return Verdict::Malformed;
        };
        if last != eos || prompt >= self.num_prompts || body.iter().any(|&t| t >= eos) {
            return Verdict::Malformed;
        }
        let correct = match self.kind {
            EnvKind::Bandit { arms } => body.first() == Some(&(prompt % arms)),
            EnvKind::Parity => {
                let ones = body.iter().filter(|&&t| t == 1).count() as u32;
                ones % 2 == prompt % 2
            }
            EnvKind::DigitSum => body.iter().copied().sum::<u32>() % 10 == prompt % 10,
        };
        if correct {
            Verdict::Correct
        } else {
            Verdict::Incorrect
        }
    }

    /// Binary reward of [`EnvSpec::verify`].
    pub fn verify_reward(&self, prompt: u32, response: &[Token]) -> f64 {
        self.verify(prompt, response).reward()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parity_rule() {
        let env = EnvSpec::new(EnvKind::Parity, 4).unwrap();
        assert_eq!(env.verify(0, &[1, 1, 2]), Verdict::Correct);
        assert_eq!(env.verify(0, &[2]), Verdict::Correct);
        assert_eq!(env.verify(1, &[1, 1, 2]), Verdict::Incorrect);
        assert_eq!(env.verify(3, &[0, 1, 0, 2]), Verdict::Correct);
    }

    #[test]
    fn digit_sum_rule() {
        let env = EnvSpec::new(EnvKind::DigitSum, 10).unwrap();
        assert_eq!(env.verify_reward(7, &[3, 4, 10]), 1.0);
        assert_eq!(env.verify_reward(7, &[3, 5, 10]), 0.0);
        assert_eq!(env.verify_reward(0, &[9, 1, 10]), 1.0);
    }

    #[test]
    fn bandit_rule() {
        let env = EnvSpec::new(EnvKind::Bandit { arms: 4 }, 4).unwrap();
        assert_eq!(env.verify_reward(2, &[2, 4]), 1.0);
        assert_eq!(env.verify_reward(2, &[1, 4]), 0.0);
        assert_eq!(env.verify(2, &[4]), Verdict::Incorrect);
    }

    #[test]
    fn malformed_responses() {
        let env = EnvSpec::new(EnvKind::Parity, 2).unwrap();
        assert_eq!(env.verify(0, &[]), Verdict::Malformed);
        assert_eq!(env.verify(0, &[1, 1]), Verdict::Malformed);
        assert_eq!(env.verify(0, &[2, 1, 2]), Verdict::Malformed);
        assert_eq!(env.verify(0, &[5, 2]), Verdict::Malformed);
        assert_eq!(env.verify(9, &[2]), Verdict::Malformed);
        assert_eq!(Verdict::Malformed.reward(), 0.0);
    }

    #[test]
    fn config_errors() {
        assert!(EnvSpec::new(EnvKind::Parity, 0).is_err());
        assert!(EnvSpec::new(EnvKind::Bandit { arms: 0 }, 3).is_err());
        assert_eq!(EnvSpec::new(EnvKind::DigitSum, 3).unwrap().vocab_size(), 11);
    }
}
