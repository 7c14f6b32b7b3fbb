//! Scalar transforms applied to per-token importance ratios.
//!
//! Every transform has two entry points: one taking the ratio `r` itself and
//! one taking `log r`. Training code always carries the log-ratio (it is the
//! difference of two log-probabilities) and uses the `*_from_log` variants so
//! that no `ln(exp(x))` round trip happens.

use crate::{Error, Result};

/// Above this magnitude softplus switches to its asymptotic form.
const SOFTPLUS_SWITCH: f64 = 30.0;
/// Above this magnitude `sech²(x)` is evaluated as `4·exp(-2|x|)`.
const SECH2_SWITCH: f64 = 20.0;

/// Saturation bound `c` of the log-fidelity modulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LfmParams {
    c: f64,
}

impl LfmParams {
    /// Default bound used by the reference configuration.
    pub const DEFAULT_C: f64 = 1.5;

    /// Builds the parameters, rejecting `c <= 0` and non-finite values.
    pub fn new(c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::config(
                "method.c",
                alloc::format!("must be finite and > 0, got {c}"),
            ));
        }
        Ok(Self { c })
    }

    /// The bound `c`.
    pub fn c(&self) -> f64 {
        self.c
    }

    /// Range `[e^-c, e^c]` of ratios mapped onto the modulator's output range.
    pub fn ratio_range(&self) -> (f64, f64) {
        (libm::exp(-self.c), libm::exp(self.c))
    }
}

impl Default for LfmParams {
    fn default() -> Self {
        Self { c: Self::DEFAULT_C }
    }
}

/// Weibull shape/scale pairs for the positive (`r > 1`) and negative
/// (`r < 1`) shift directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DhpParams {
    k_pos: f64,
    lambda_pos: f64,
    k_neg: f64,
    lambda_neg: f64,
}

impl DhpParams {
    /// Builds the parameters. Shapes must be `>= 1`, scales `> 0`.
    pub fn new(k_pos: f64, lambda_pos: f64, k_neg: f64, lambda_neg: f64) -> Result<Self> {
        check_shape("method.k_pos", k_pos)?;
        check_scale("method.lambda_pos", lambda_pos)?;
        check_shape("method.k_neg", k_neg)?;
        check_scale("method.lambda_neg", lambda_neg)?;
        Ok(Self {
            k_pos,
            lambda_pos,
            k_neg,
            lambda_neg,
        })
    }

    /// Mirrored configuration with one shape and one scale for both sides.
    pub fn symmetric(k: f64, lambda: f64) -> Result<Self> {
        Self::new(k, lambda, k, lambda)
    }

    /// Shape for positive shifts.
    pub fn k_pos(&self) -> f64 {
        self.k_pos
    }

    /// Scale for positive shifts.
    pub fn lambda_pos(&self) -> f64 {
        self.lambda_pos
    }

    /// Shape for negative shifts.
    pub fn k_neg(&self) -> f64 {
        self.k_neg
    }

    /// Scale for negative shifts.
    pub fn lambda_neg(&self) -> f64 {
        self.lambda_neg
    }
}

impl Default for DhpParams {
    /// `(k+, λ+) = (1.5, 1.0)`, `(k-, λ-) = (2.0, 0.8)`.
    fn default() -> Self {
        Self {
            k_pos: 1.5,
            lambda_pos: 1.0,
            k_neg: 2.0,
            lambda_neg: 0.8,
        }
    }
}

fn check_shape(field: &'static str, k: f64) -> Result<()> {
    if !(k.is_finite() && k >= 1.0) {
        return Err(Error::config(
            field,
            alloc::format!("must be finite and >= 1, got {k}"),
        ));
    }
    Ok(())
}

fn check_scale(field: &'static str, lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::config(
            field,
            alloc::format!("must be finite and > 0, got {lambda}"),
        ));
    }
    Ok(())
}

fn check_ratio(r: f64) -> Result<f64> {
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::domain("ratio", r));
    }
    Ok(libm::log(r))
}

fn check_finite(what: &'static str, x: f64) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::domain(what, x));
    }
    Ok(())
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> Result<f64> {
    check_finite("softplus input", x)?;
    Ok(softplus_unchecked(x))
}

pub(crate) fn softplus_unchecked(x: f64) -> f64 {
    if x > SOFTPLUS_SWITCH {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// `sech²(x) = 4 / (e^x + e^-x)²`.
pub fn sech2(x: f64) -> f64 {
    let a = x.abs();
    if a > SECH2_SWITCH {
        4.0 * libm::exp(-2.0 * a)
    } else {
        let e = libm::exp(a);
        let d = e + 1.0 / e;
        4.0 / (d * d)
    }
}

/// `ln sech²(x)`, finite for every finite `x`.
fn ln_sech2(x: f64) -> f64 {
    let a = x.abs();
    core::f64::consts::LN_2 * 2.0 - 2.0 * a - 2.0 * libm::log1p(libm::exp(-2.0 * a))
}

/// Log-fidelity modulator `ψ(r) = c·tanh(ln r / c)`.
pub fn lfm(r: f64, p: LfmParams) -> Result<f64> {
    let log_r = check_ratio(r)?;
    Ok(lfm_from_log(log_r, p))
}

/// [`lfm`] evaluated on `ln r`.
pub fn lfm_from_log(log_r: f64, p: LfmParams) -> f64 {
    p.c * libm::tanh(log_r / p.c)
}

/// `dψ/dr = sech²(ln r / c) / r`.
pub fn lfm_derivative(r: f64, p: LfmParams) -> Result<f64> {
    let log_r = check_ratio(r)?;
    Ok(lfm_derivative_from_log(log_r, p))
}

/// [`lfm_derivative`] evaluated on `ln r`.
pub fn lfm_derivative_from_log(log_r: f64, p: LfmParams) -> f64 {
    // exp(ln sech² - ln r) stays positive where sech²/r would underflow to 0/0.
    libm::exp(ln_sech2(log_r / p.c) - log_r)
}

/// Positive- and negative-direction Weibull cumulative hazard terms of the
/// penalty, in that order.
pub fn dhp_terms(psi: f64, d: DhpParams) -> Result<(f64, f64)> {
    check_finite("psi", psi)?;
    Ok(dhp_terms_unchecked(psi, d))
}

fn dhp_terms_unchecked(psi: f64, d: DhpParams) -> (f64, f64) {
    let pos = libm::pow(softplus_unchecked(psi) / d.lambda_pos, d.k_pos);
    let neg = libm::pow(softplus_unchecked(-psi) / d.lambda_neg, d.k_neg);
    (pos, neg)
}

/// Decoupled hazard penalty `ζ(ψ) = (s(ψ)/λ+)^k+ + (s(-ψ)/λ-)^k-`.
pub fn dhp_penalty(psi: f64, d: DhpParams) -> Result<f64> {
    let (pos, neg) = dhp_terms(psi, d)?;
    Ok(pos + neg)
}

/// Survival weight `exp(-ζ(ψ))`, always in `(0, 1]`.
pub fn survival_weight(psi: f64, d: DhpParams) -> Result<f64> {
    Ok(libm::exp(-dhp_penalty(psi, d)?))
}

/// Gradient multiplier `M(r) = exp(ψ(r) - ζ(r))·sech²(ln r / c)`.
pub fn gradient_multiplier(r: f64, p: LfmParams, d: DhpParams) -> Result<f64> {
    let log_r = check_ratio(r)?;
    Ok(gradient_multiplier_from_log(log_r, p, d))
}

/// [`gradient_multiplier`] evaluated on `ln r`.
pub fn gradient_multiplier_from_log(log_r: f64, p: LfmParams, d: DhpParams) -> f64 {
    let psi = lfm_from_log(log_r, p);
    let (pos, neg) = dhp_terms_unchecked(psi, d);
    libm::exp(psi - (pos + neg) + ln_sech2(log_r / p.c))
}

/// Hazard-free multiplier `exp(ψ(r))·sech²(ln r / c)`; its supremum over `r`
/// is [`multiplier_bound`].
pub fn fidelity_envelope_from_log(log_r: f64, p: LfmParams) -> f64 {
    libm::exp(lfm_from_log(log_r, p) + ln_sech2(log_r / p.c))
}

/// Closed-form supremum of the gradient multiplier:
/// `2/(1+√(1+c²))·exp(c²/(1+√(1+c²)))`, which never exceeds `e^c`.
pub fn multiplier_bound(p: LfmParams) -> f64 {
    let c = p.c;
    let s = 1.0 + libm::sqrt(1.0 + c * c);
    2.0 / s * libm::exp(c * c / s)
}

/// Per-token quantities derived from one ratio and its response's advantage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenCredit {
    /// Importance ratio `r`.
    pub ratio: f64,
    /// `ln r`.
    pub log_ratio: f64,
    /// Modulated log-ratio, `|psi| <= c`.
    pub psi: f64,
    /// Hazard penalty, `>= 0`.
    pub zeta: f64,
    /// `exp(-zeta)`.
    pub survival_weight: f64,
    /// Gradient multiplier `M(r)`.
    pub multiplier: f64,
    /// Group-relative advantage shared by all tokens of the response.
    pub advantage: f64,
}

impl TokenCredit {
    /// Computes every derived quantity from `ln r`.
    pub fn from_log_ratio(
        log_ratio: f64,
        advantage: f64,
        p: LfmParams,
        d: DhpParams,
    ) -> Result<Self> {
        check_finite("log ratio", log_ratio)?;
        check_finite("advantage", advantage)?;
        let psi = lfm_from_log(log_ratio, p);
        let (pos, neg) = dhp_terms_unchecked(psi, d);
        let zeta = pos + neg;
        Ok(Self {
            ratio: libm::exp(log_ratio),
            log_ratio,
            psi,
            zeta,
            survival_weight: libm::exp(-zeta),
            multiplier: libm::exp(psi - zeta + ln_sech2(log_ratio / p.c)),
            advantage,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn log_grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
        let (a, b) = (lo.ln(), hi.ln());
        (0..n).map(move |i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
    }

    #[test]
    fn softplus_values() {
        assert_relative_eq!(
            softplus(0.0).unwrap(),
            core::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            softplus(1.0).unwrap(),
            1.313_261_687_518_223,
            epsilon = 1e-14
        );
        let d = softplus(1.0).unwrap() - softplus(-1.0).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
        assert!((softplus(50.0).unwrap() - 50.0).abs() < 1e-12);
        assert!(softplus(800.0).unwrap().is_finite());
        assert!(softplus(f64::NAN).is_err());
        assert!(softplus(f64::INFINITY).is_err());
    }

    #[test]
    fn softplus_branches_agree_at_switch() {
        let naive = |x: f64| (1.0 + x.exp()).ln();
        for x in [29.0, 29.999, 30.0, 30.001, 31.0, -29.0, -31.0] {
            assert_relative_eq!(softplus(x).unwrap(), naive(x), max_relative = 1e-13);
        }
    }

    #[test]
    fn sech2_matches_cosh() {
        for x in [-25.0f64, -20.5, -3.0, -0.1, 0.0, 0.7, 19.9, 20.1, 40.0] {
            let oracle = 1.0 / x.cosh().powi(2);
            assert_relative_eq!(sech2(x), oracle, max_relative = 1e-12);
            assert_relative_eq!(ln_sech2(x).exp(), oracle, max_relative = 1e-12);
        }
    }

    #[test]
    fn lfm_marked_points() {
        let c1 = LfmParams::new(1.0).unwrap();
        assert_eq!(lfm(1.0, c1).unwrap(), 0.0);
        assert!((lfm(2.0, c1).unwrap() - 0.6).abs() < 1e-12);
        assert!((lfm(0.5, c1).unwrap() + 0.6).abs() < 1e-12);
        // tanh(2) from its exponential definition
        let tanh2 = (4f64.exp() - 1.0) / (4f64.exp() + 1.0);
        let p = LfmParams::default();
        assert_relative_eq!(
            lfm(3f64.exp(), p).unwrap(),
            1.5 * tanh2,
            max_relative = 1e-14
        );
        assert_relative_eq!(lfm(3f64.exp(), p).unwrap(), 1.446_041, epsilon = 1e-6);
    }

    #[test]
    fn lfm_rejects_bad_ratio() {
        let p = LfmParams::default();
        for r in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(lfm(r, p).is_err());
            assert!(lfm_derivative(r, p).is_err());
            assert!(gradient_multiplier(r, p, DhpParams::default()).is_err());
        }
    }

    #[test]
    fn params_validation() {
        assert!(LfmParams::new(0.0).is_err());
        assert!(LfmParams::new(-1.0).is_err());
        assert!(LfmParams::new(f64::NAN).is_err());
        assert!(DhpParams::new(0.9, 1.0, 2.0, 0.8).is_err());
        assert!(DhpParams::new(1.5, 0.0, 2.0, 0.8).is_err());
        assert!(DhpParams::new(1.5, 1.0, 2.0, -0.8).is_err());
        assert!(DhpParams::symmetric(1.0, 1.0).is_ok());
    }

    #[test]
    fn lfm_derivative_at_anchor_and_tail() {
        for c in [0.5, 1.0, 1.5, 2.0] {
            assert_eq!(
                lfm_derivative(1.0, LfmParams::new(c).unwrap()).unwrap(),
                1.0
            );
        }
        let p = LfmParams::default();
        assert!(lfm_derivative(1e6, p).unwrap() < 1e-6);
        assert!(lfm_derivative(1e-300, p).unwrap() > 0.0);
    }

    /// ψ(r) up to an additive constant, written so that differences stay
    /// resolvable where tanh saturates: c·tanh(u) = ±c ∓ 2c/(e^{2|u|}+1).
    fn saturation_oracle(r: f64, c: f64) -> f64 {
        let u = r.ln() / c;
        if u.abs() < 1.0 {
            c * u.tanh()
        } else {
            -u.signum() * 2.0 * c / ((2.0 * u.abs()).exp() + 1.0)
        }
    }

    #[test]
    fn lfm_derivative_matches_central_difference() {
        for c in [0.5, 1.0, 1.5, 2.0] {
            let p = LfmParams::new(c).unwrap();
            for r in log_grid(1e-3, 1e3, 601) {
                let h = 1e-6 * r;
                let fd = (saturation_oracle(r + h, c) - saturation_oracle(r - h, c)) / (2.0 * h);
                assert_relative_eq!(fd, lfm_derivative(r, p).unwrap(), max_relative = 1e-6);
            }
        }
        let p = LfmParams::new(1.0).unwrap();
        let h = 2e-6;
        let fd = (lfm(2.0 + h, p).unwrap() - lfm(2.0 - h, p).unwrap()) / (2.0 * h);
        assert_relative_eq!(fd, lfm_derivative(2.0, p).unwrap(), max_relative = 1e-6);
    }

    #[test]
    fn dhp_reference_values() {
        let d = DhpParams::default();
        let ln2 = core::f64::consts::LN_2;
        let hand = ln2.powf(1.5) + (ln2 / 0.8).powi(2);
        assert_relative_eq!(dhp_penalty(0.0, d).unwrap(), hand, max_relative = 1e-14);
        assert_relative_eq!(dhp_penalty(0.0, d).unwrap(), 1.327_790_716, epsilon = 1e-9);
        let sp1 = (1.0 + 1f64.exp()).ln();
        let spm1 = (1.0 + (-1f64).exp()).ln();
        let hand1 = sp1.powf(1.5) + (spm1 / 0.8).powi(2);
        assert_relative_eq!(dhp_penalty(1.0, d).unwrap(), hand1, max_relative = 1e-14);
        assert_relative_eq!(dhp_penalty(1.0, d).unwrap(), 1.658_299_406, epsilon = 1e-9);
        assert!(dhp_penalty(f64::NAN, d).is_err());
    }

    #[test]
    fn dhp_mirror_symmetry() {
        let d = DhpParams::symmetric(1.7, 0.9).unwrap();
        for a in [0.0, 0.3, 1.1, 1.5, 4.0] {
            assert_eq!(dhp_penalty(a, d).unwrap(), dhp_penalty(-a, d).unwrap());
        }
    }

    #[test]
    fn dhp_directional_dominance() {
        let d = DhpParams::default();
        let (pos, neg) = dhp_terms(2.0, d).unwrap();
        assert!(pos > 10.0 * neg, "pos={pos} neg={neg}");
        let (pos, neg) = dhp_terms(-2.0, d).unwrap();
        assert!(neg > 10.0 * pos, "pos={pos} neg={neg}");
    }

    #[test]
    fn survival_weight_values() {
        let d = DhpParams::default();
        let at0 = survival_weight(0.0, d).unwrap();
        assert_relative_eq!(at0, (-1.327_790_716_f64).exp(), max_relative = 1e-9);
        assert_relative_eq!(at0, 0.265_062_213, epsilon = 1e-9);
        assert!(survival_weight(1.5, d).unwrap() < at0);
        assert!(survival_weight(-1.5, d).unwrap() < at0);
    }

    #[test]
    fn survival_weight_unimodal() {
        let d = DhpParams::default();
        let psis: alloc::vec::Vec<f64> =
            (0..=4000).map(|i| -4.0 + 8.0 * i as f64 / 4000.0).collect();
        let w: alloc::vec::Vec<f64> = psis
            .iter()
            .map(|&p| survival_weight(p, d).unwrap())
            .collect();
        let peak = (0..w.len()).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
        assert!(w[..=peak].windows(2).all(|p| p[0] <= p[1]));
        assert!(w[peak..].windows(2).all(|p| p[0] >= p[1]));
        assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
    }

    #[test]
    fn multiplier_reference_values() {
        let p = LfmParams::default();
        let d = DhpParams::default();
        assert_relative_eq!(
            gradient_multiplier(1.0, p, d).unwrap(),
            0.265_062_213,
            epsilon = 1e-9
        );
        assert!(gradient_multiplier(1e4, p, d).unwrap() < 0.01);
        // M(e^10) ≈ 2.96e-6: sech²(10/1.5) ≈ 6.5e-6 times exp(ψ - ζ) ≈ 0.457
        assert_relative_eq!(
            gradient_multiplier(10f64.exp(), p, d).unwrap(),
            2.961_781_237_8e-6,
            max_relative = 1e-9
        );
        assert_relative_eq!(
            gradient_multiplier(1e4, p, d).unwrap(),
            8.488_129_960_1e-6,
            max_relative = 1e-9
        );
    }

    #[test]
    fn bound_closed_form_values() {
        // hand arithmetic: c=1.5 → √3.25; c=1 → √2
        let s = 1.0 + 3.25f64.sqrt();
        assert_relative_eq!(
            multiplier_bound(LfmParams::new(1.5).unwrap()),
            2.0 / s * (2.25 / s).exp(),
            max_relative = 1e-15
        );
        // 30-digit reference evaluations of the closed form
        assert_relative_eq!(
            multiplier_bound(LfmParams::new(1.5).unwrap()),
            1.592_511_919_062,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            multiplier_bound(LfmParams::new(1.0).unwrap()),
            1.253_559_564_347,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            multiplier_bound(LfmParams::new(0.5).unwrap()),
            1.062_572_521_154,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            multiplier_bound(LfmParams::new(2.0).unwrap()),
            2.127_305_493_641,
            epsilon = 1e-12
        );
        assert!(multiplier_bound(LfmParams::new(0.5).unwrap()) <= 0.5f64.exp());
        assert_relative_eq!(
            multiplier_bound(LfmParams::new(1e-8).unwrap()),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn bound_matches_grid_maximum() {
        for c in [0.5, 1.0, 1.5, 2.0] {
            let p = LfmParams::new(c).unwrap();
            let grid_max = log_grid(1e-6, 1e6, 100_000)
                .map(|r| {
                    let u = r.ln() / c;
                    (c * u.tanh()).exp() / u.cosh().powi(2)
                })
                .fold(0.0f64, f64::max);
            let bound = multiplier_bound(p);
            assert!(
                ((grid_max - bound) / bound).abs() < 1e-4,
                "c={c} grid={grid_max} bound={bound}"
            );
            assert!(grid_max <= bound + 1e-9);
            let d = DhpParams::default();
            for r in log_grid(1e-6, 1e6, 20_000) {
                assert!(gradient_multiplier(r, p, d).unwrap() <= bound + 1e-9);
            }
        }
    }

    #[test]
    fn bound_below_exponential() {
        for i in 1..=5000 {
            let c = 5.0 * i as f64 / 5000.0;
            assert!(multiplier_bound(LfmParams::new(c).unwrap()) < c.exp());
        }
    }

    #[test]
    fn local_fidelity_cubic_remainder() {
        for c in [0.5, 1.0, 1.5, 2.0] {
            let p = LfmParams::new(c).unwrap();
            for i in 1..=1000 {
                let x = (c / 100.0) * i as f64 / 1000.0;
                for lr in [x, -x] {
                    let r = lr.exp();
                    let log_r = r.ln();
                    let err = (lfm(r, p).unwrap() - log_r).abs();
                    let bound = log_r.abs().powi(3) / (3.0 * c * c) * (1.0 + 1e-6);
                    // a few ulps of ln r for rounding in c·tanh(x/c)
                    assert!(
                        err <= bound + 4.0 * f64::EPSILON * log_r.abs(),
                        "c={c} x={lr} err={err} bound={bound}"
                    );
                }
            }
        }
    }

    #[test]
    fn reciprocal_antisymmetry_grid() {
        for c in [0.5, 1.0, 1.5] {
            let p = LfmParams::new(c).unwrap();
            for r in log_grid(1e-6, 1e6, 10_000) {
                let a = lfm(r, p).unwrap();
                let b = lfm(1.0 / r, p).unwrap();
                assert!((a + b).abs() <= 1e-12);
                // tanh rounds to exactly 1 once |ln r|/c exceeds ~19
                assert!(a.abs() <= c);
                if (r.ln() / c).abs() < 18.0 {
                    assert!(a.abs() < c);
                }
            }
        }
    }

    #[test]
    fn token_credit_consistency() {
        let p = LfmParams::default();
        let d = DhpParams::default();
        let tc = TokenCredit::from_log_ratio(0.4, -1.2, p, d).unwrap();
        assert_relative_eq!(tc.ratio, 0.4f64.exp());
        assert_relative_eq!(tc.psi, lfm(tc.ratio, p).unwrap(), max_relative = 1e-14);
        assert_relative_eq!(
            tc.zeta,
            dhp_penalty(tc.psi, d).unwrap(),
            max_relative = 1e-14
        );
        assert_relative_eq!(tc.survival_weight, (-tc.zeta).exp());
        assert_relative_eq!(
            tc.multiplier,
            gradient_multiplier(tc.ratio, p, d).unwrap(),
            max_relative = 1e-13
        );
        assert!(tc.multiplier <= multiplier_bound(p));
    }
}
