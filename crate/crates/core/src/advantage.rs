//! Group-relative advantages.
//!
//! Each response's reward is standardized by the mean and population
//! standard deviation of its group. A group whose spread is below the
//! degeneracy tolerance carries no learning signal and gets all-zero
//! advantages.

use alloc::vec::Vec;

use crate::{Error, Result};

/// Default spread below which a group is treated as degenerate.
pub const DEFAULT_DEGENERACY_TOL: f64 = 1e-8;

/// Standardized advantages of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageVector {
    /// One advantage per response, shared by all of its tokens.
    pub values: Vec<f64>,
    /// True when the zero-spread rule produced all zeros.
    pub degenerate: bool,
}

/// Standardizes `rewards` as `(R_i - mean) / std` with the population
/// (divide-by-K) standard deviation.
pub fn group_normalize(rewards: &[f64], degeneracy_tol: f64) -> Result<AdvantageVector> {
    if rewards.len() < 2 {
        return Err(Error::config(
            "train.group_size",
            alloc::format!(
                "group normalization needs at least 2 rewards, got {}",
                rewards.len()
            ),
        ));
    }
    if let Some(&bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::domain("reward", bad));
    }
    let k = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / k;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / k;
    let std = libm::sqrt(var);
    if !(std >= degeneracy_tol) {
        return Ok(AdvantageVector {
            values: alloc::vec![0.0; rewards.len()],
            degenerate: true,
        });
    }
    Ok(AdvantageVector {
        values: rewards.iter().map(|r| (r - mean) / std).collect(),
        degenerate: false,
    })
}
