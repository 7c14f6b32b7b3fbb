//! Per-token surrogate terms and their gradient coefficients.
//!
//! For every method the parameter gradient of a token's term has the form
//! `grad_coefficient · A · ∇ log π(token)`. The coefficient is what differs:
//!
//! | method      | coefficient                                          |
//! |-------------|------------------------------------------------------|
//! | `mhpo`      | `M(r) = exp(ψ - ζ)·sech²(ln r / c)`, ζ held constant |
//! | `grpo_clip` | `r` when the unclipped branch is active, else `0`    |
//! | `dapo_clip` | same with asymmetric bounds                          |
//! | `naive_pg`  | `r`                                                  |

use core::fmt;

use crate::ratio::{self, DhpParams, LfmParams};
use crate::{Error, Result};

/// Surrogate objective used for the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MethodConfig {
    /// Log-fidelity modulator with decoupled hazard penalty.
    Mhpo {
        /// Saturation bound.
        lfm: LfmParams,
        /// Hazard shaping.
        dhp: DhpParams,
    },
    /// Symmetric hard clip `[1-eps, 1+eps]`.
    GrpoClip {
        /// Clip half-width.
        eps: f64,
    },
    /// Asymmetric hard clip `[1-eps_low, 1+eps_high]`.
    DapoClip {
        /// Lower half-width.
        eps_low: f64,
        /// Upper half-width.
        eps_high: f64,
    },
    /// Unregularized importance-weighted policy gradient.
    NaivePg,
}

impl MethodConfig {
    /// Modulated objective with the reference hyperparameters.
    pub fn mhpo_default() -> Self {
        MethodConfig::Mhpo {
            lfm: LfmParams::default(),
            dhp: DhpParams::default(),
        }
    }

    /// Symmetric clip, validating `eps ∈ (0, 1)`.
    pub fn grpo_clip(eps: f64) -> Result<Self> {
        check_eps("method.eps", eps)?;
        Ok(MethodConfig::GrpoClip { eps })
    }

    /// Asymmetric clip, validating both half-widths in `(0, 1)`.
    pub fn dapo_clip(eps_low: f64, eps_high: f64) -> Result<Self> {
        check_eps("method.eps_low", eps_low)?;
        check_eps("method.eps_high", eps_high)?;
        Ok(MethodConfig::DapoClip { eps_low, eps_high })
    }

    /// Re-checks the clip widths (the modulated variant validates on construction).
    pub fn validate(&self) -> Result<()> {
        match *self {
            MethodConfig::GrpoClip { eps } => check_eps("method.eps", eps),
            MethodConfig::DapoClip { eps_low, eps_high } => {
                check_eps("method.eps_low", eps_low)?;
                check_eps("method.eps_high", eps_high)
            }
            MethodConfig::Mhpo { .. } | MethodConfig::NaivePg => Ok(()),
        }
    }

    /// Short identifier used in configs, logs and reports.
    pub fn name(&self) -> &'static str {
        match self {
            MethodConfig::Mhpo { .. } => "mhpo",
            MethodConfig::GrpoClip { .. } => "grpo_clip",
            MethodConfig::DapoClip { .. } => "dapo_clip",
            MethodConfig::NaivePg => "naive_pg",
        }
    }

    /// Upper bound on `|grad_coefficient|`, when one exists.
    pub fn coefficient_bound(&self) -> Option<f64> {
        match self {
            MethodConfig::Mhpo { lfm, .. } => Some(ratio::multiplier_bound(*lfm)),
            _ => None,
        }
    }

    /// Term for ratio `r`.
    pub fn token_term(&self, r: f64, adv: f64) -> Result<TokenTerm> {
        check_ratio(r)?;
        Ok(self.token_term_from_log(libm::log(r), adv))
    }

    /// Term for `ln r`. Baselines exponentiate the log-ratio, so an extreme
    /// drift may yield non-finite values; callers treat those as incidents.
    pub fn token_term_from_log(&self, log_r: f64, adv: f64) -> TokenTerm {
        match *self {
            MethodConfig::Mhpo { lfm, dhp } => mhpo_from_log(log_r, adv, lfm, dhp),
            MethodConfig::GrpoClip { eps } => {
                clip_term(libm::exp(log_r), adv, 1.0 - eps, 1.0 + eps)
            }
            MethodConfig::DapoClip { eps_low, eps_high } => {
                clip_term(libm::exp(log_r), adv, 1.0 - eps_low, 1.0 + eps_high)
            }
            MethodConfig::NaivePg => naive_term(libm::exp(log_r), adv),
        }
    }
}

impl fmt::Display for MethodConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn check_eps(field: &'static str, eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::config(
            field,
            alloc::format!("must lie in (0, 1), got {eps}"),
        ));
    }
    Ok(())
}

fn check_ratio(r: f64) -> Result<()> {
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::domain("ratio", r));
    }
    Ok(())
}

/// One token's contribution to the surrogate and its gradient scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenTerm {
    /// Term value before negation and averaging.
    pub objective_value: f64,
    /// Scalar multiplying `A · ∇ log π` in the parameter gradient.
    pub grad_coefficient: f64,
}

/// Modulated term: value `exp(ψ - ζ)·A`, coefficient `M(r)`.
pub fn mhpo_token_term(r: f64, adv: f64, lfm: LfmParams, dhp: DhpParams) -> Result<TokenTerm> {
    check_ratio(r)?;
    Ok(mhpo_from_log(libm::log(r), adv, lfm, dhp))
}

fn mhpo_from_log(log_r: f64, adv: f64, lfm: LfmParams, dhp: DhpParams) -> TokenTerm {
    let psi = ratio::lfm_from_log(log_r, lfm);
    // ζ is evaluated on a value copy of ψ: the stop-gradient point.
    let zeta = ratio::dhp_penalty(psi, dhp).unwrap_or(f64::NAN);
    TokenTerm {
        objective_value: libm::exp(psi - zeta) * adv,
        grad_coefficient: ratio::gradient_multiplier_from_log(log_r, lfm, dhp),
    }
}

/// Symmetric clipped term `min(r·A, clip(r, 1-eps, 1+eps)·A)`.
pub fn grpo_token_term(r: f64, adv: f64, eps: f64) -> Result<TokenTerm> {
    check_ratio(r)?;
    check_eps("method.eps", eps)?;
    Ok(clip_term(r, adv, 1.0 - eps, 1.0 + eps))
}

/// Asymmetric clipped term with bounds `[1-eps_low, 1+eps_high]`.
pub fn dapo_token_term(r: f64, adv: f64, eps_low: f64, eps_high: f64) -> Result<TokenTerm> {
    check_ratio(r)?;
    check_eps("method.eps_low", eps_low)?;
    check_eps("method.eps_high", eps_high)?;
    Ok(clip_term(r, adv, 1.0 - eps_low, 1.0 + eps_high))
}

/// Unclipped term `r·A`.
pub fn naive_pg_token_term(r: f64, adv: f64) -> Result<TokenTerm> {
    check_ratio(r)?;
    Ok(naive_term(r, adv))
}

fn naive_term(r: f64, adv: f64) -> TokenTerm {
    TokenTerm {
        objective_value: if adv == 0.0 { 0.0 } else { r * adv },
        grad_coefficient: r,
    }
}

fn clip_term(r: f64, adv: f64, lo: f64, hi: f64) -> TokenTerm {
    if adv == 0.0 {
        return TokenTerm {
            objective_value: 0.0,
            grad_coefficient: r,
        };
    }
    let unclipped = r * adv;
    let clipped = r.clamp(lo, hi) * adv;
    // ties count as the unclipped branch
    if unclipped <= clipped {
        TokenTerm {
            objective_value: unclipped,
            grad_coefficient: r,
        }
    } else {
        TokenTerm {
            objective_value: clipped,
            grad_coefficient: 0.0,
        }
    }
}

/// Aggregated surrogate over a batch of responses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    /// `-(1/K) Σ_i (1/T_i) Σ_t term`.
    pub loss: f64,
    /// Responses that contributed.
    pub responses: usize,
    /// Empty responses skipped.
    pub skipped_empty: usize,
}

/// Negative mean over responses of the token-mean term value. Each element
/// of `responses` holds one response's per-token objective values. Empty
/// responses are skipped and counted; `K` counts only the non-empty ones.
pub fn batch_loss<R: AsRef<[f64]>>(responses: &[R]) -> BatchLoss {
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for resp in responses {
        let terms = resp.as_ref();
        if terms.is_empty() {
            skipped += 1;
            continue;
        }
        total += terms.iter().sum::<f64>() / terms.len() as f64;
        used += 1;
    }
    let loss = if used == 0 { 0.0 } else { -total / used as f64 };
    BatchLoss {
        loss,
        responses: used,
        skipped_empty: skipped,
    }
}
