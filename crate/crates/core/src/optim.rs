//! Parameter updates on the logit table.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::policy::{ContextKey, Gradient, PolicyParams};
use crate::{Error, Result};

/// Which update rule the trainer applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    /// Bias-corrected first/second moment rescaling (Adam).
    AdaptiveMoment {
        /// First-moment decay.
        beta1: f64,
        /// Second-moment decay.
        beta2: f64,
        /// Added to the square-root denominator.
        epsilon_hat: f64,
    },
}

impl OptimizerKind {
    /// Adaptive rule with decays `(0.9, 0.999)` and `epsilon_hat = 1e-8`.
    pub fn adaptive_default() -> Self {
        OptimizerKind::AdaptiveMoment {
            beta1: 0.9,
            beta2: 0.999,
            epsilon_hat: 1e-8,
        }
    }

    /// Identifier used in configs.
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdaptiveMoment { .. } => "adaptive_moment",
        }
    }

    /// Checks decays in `(0, 1)` and a positive `epsilon_hat`.
    pub fn validate(&self) -> Result<()> {
        if let OptimizerKind::AdaptiveMoment {
            beta1,
            beta2,
            epsilon_hat,
        } = *self
        {
            for (field, b) in [("train.beta1", beta1), ("train.beta2", beta2)] {
                if !(b > 0.0 && b < 1.0) {
                    return Err(Error::config(
                        field,
                        alloc::format!("must lie in (0, 1), got {b}"),
                    ));
                }
            }
            if !(epsilon_hat > 0.0 && epsilon_hat.is_finite()) {
                return Err(Error::config(
                    "train.epsilon_hat",
                    alloc::format!("must be finite and > 0, got {epsilon_hat}"),
                ));
            }
        }
        Ok(())
    }
}

/// Moment accumulators, one row per materialized logit row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    /// Exponential average of gradients.
    pub first_moment: BTreeMap<ContextKey, Vec<f64>>,
    /// Exponential average of squared gradients; entries are `>= 0`.
    pub second_moment: BTreeMap<ContextKey, Vec<f64>>,
    /// Updates applied so far.
    pub step_count: u64,
}

fn check(grad: &Gradient, lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::config(
            "train.learning_rate",
            alloc::format!("must be finite and > 0, got {lr}"),
        ));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(())
}

/// `θ ← θ - lr·grad`. Leaves `params` untouched on a non-finite gradient.
pub fn sgd_update(params: &mut PolicyParams, grad: &Gradient, lr: f64) -> Result<()> {
    check(grad, lr)?;
    for (key, g) in grad.rows() {
        for (p, gi) in params.row_mut(key).iter_mut().zip(g) {
            *p -= lr * gi;
        }
    }
    Ok(())
}

/// Bias-corrected moment update. Rows that carry moment state keep moving
/// when absent from `grad` (their gradient is zero this step), as in the
/// dense rule.
pub fn adaptive_update(
    params: &mut PolicyParams,
    grad: &Gradient,
    state: &mut OptimizerState,
    lr: f64,
    decays: (f64, f64),
    epsilon_hat: f64,
) -> Result<()> {
    check(grad, lr)?;
    let (b1, b2) = decays;
    let width = params.shape().vocab_size;
    for (key, _) in grad.rows() {
        if !state.first_moment.contains_key(key) {
            state.first_moment.insert(key.clone(), vec![0.0; width]);
            state.second_moment.insert(key.clone(), vec![0.0; width]);
        }
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let c1 = 1.0 - libm::pow(b1, t);
    let c2 = 1.0 - libm::pow(b2, t);
    let zeros = vec![0.0; width];
    for (key, m) in state.first_moment.iter_mut() {
        let v = state
            .second_moment
            .get_mut(key)
            .expect("moment rows are paired");
        let g = grad.row(key).unwrap_or(&zeros);
        let row = params.row_mut(key);
        for i in 0..width {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            row[i] -= lr * m_hat / (libm::sqrt(v_hat) + epsilon_hat);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyShape;
    use approx::assert_relative_eq;

    fn setup() -> (PolicyParams, ContextKey) {
        let p = PolicyParams::uniform(PolicyShape::new(3, 1, 4).unwrap());
        let key = p.shape().context_key(0, &[]);
        (p, key)
    }

    #[test]
    fn sgd_basic() {
        let (mut p, key) = setup();
        p.set_row(key.clone(), vec![1.0, 0.0, 0.0]).unwrap();
        let mut g = Gradient::new();
        g.add_scaled(&key, &[2.0, 0.0, 0.0], 1.0);
        sgd_update(&mut p, &g, 0.1).unwrap();
        assert_relative_eq!(p.row(&key).unwrap()[0], 0.8, epsilon = 1e-15);
        let before = p.clone();
        sgd_update(&mut p, &Gradient::new(), 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_linear_in_constant_gradients() {
        let (p0, key) = setup();
        let mut g1 = Gradient::new();
        g1.add_scaled(&key, &[1.0, -0.5, 0.25], 1.0);
        let mut g2 = Gradient::new();
        g2.add_scaled(&key, &[-0.3, 0.2, 0.1], 1.0);
        let mut a = p0.clone();
        sgd_update(&mut a, &g1, 0.1).unwrap();
        sgd_update(&mut a, &g2, 0.1).unwrap();
        let mut sum = g1.clone();
        sum.add_scaled(&key, g2.row(&key).unwrap(), 1.0);
        let mut b = p0;
        sgd_update(&mut b, &sum, 0.1).unwrap();
        for (x, y) in a.row(&key).unwrap().iter().zip(b.row(&key).unwrap()) {
            assert_relative_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let (mut p, key) = setup();
        let mut g = Gradient::new();
        g.add_scaled(&key, &[f64::NAN, 0.0, 0.0], 1.0);
        let before = p.clone();
        assert_eq!(
            sgd_update(&mut p, &g, 0.1),
            Err(Error::NonFinite("gradient"))
        );
        let mut st = OptimizerState::default();
        assert!(adaptive_update(&mut p, &g, &mut st, 0.1, (0.9, 0.999), 1e-8).is_err());
        assert_eq!(p, before);
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn adaptive_first_step_is_signed_lr() {
        // m̂ = g, v̂ = g² after bias correction, so the step is lr·g/(|g|+ε̂)
        let (mut p, key) = setup();
        let mut g = Gradient::new();
        g.add_scaled(&key, &[0.3, -4.0, 1e-3], 1.0);
        let mut st = OptimizerState::default();
        adaptive_update(&mut p, &g, &mut st, 0.01, (0.9, 0.999), 1e-8).unwrap();
        let row = p.row(&key).unwrap();
        assert_relative_eq!(row[0], -0.01, max_relative = 1e-6);
        assert_relative_eq!(row[1], 0.01, max_relative = 1e-6);
        assert_relative_eq!(row[2], -0.01, max_relative = 1e-4);
    }

    #[test]
    fn adaptive_zero_gradient_is_noop() {
        let (mut p, key) = setup();
        let mut g = Gradient::new();
        g.add_scaled(&key, &[0.0, 0.0, 0.0], 1.0);
        let mut st = OptimizerState::default();
        for _ in 0..10 {
            adaptive_update(&mut p, &g, &mut st, 0.01, (0.9, 0.999), 1e-8).unwrap();
        }
        assert!(p.row(&key).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn adaptive_constant_gradient_step_tends_to_lr() {
        let (mut p, key) = setup();
        let mut g = Gradient::new();
        g.add_scaled(&key, &[0.5, -2.0, 0.0], 1.0);
        let mut st = OptimizerState::default();
        let mut prev = p.row(&key).map(<[f64]>::to_vec).unwrap_or(vec![0.0; 3]);
        for _ in 0..5000 {
            adaptive_update(&mut p, &g, &mut st, 0.01, (0.9, 0.999), 1e-8).unwrap();
            let now = p.row(&key).unwrap().to_vec();
            for i in 0..2 {
                assert_relative_eq!((now[i] - prev[i]).abs(), 0.01, max_relative = 1e-6);
            }
            prev = now;
        }
        assert!(st.second_moment.values().flatten().all(|&v| v >= 0.0));
    }
}
