//! The model's pure building blocks, shared by the estimator and the simulator.

use serde::{Deserialize, Serialize};

use crate::data::{N_CATEGORIES, N_STAKEHOLDERS, N_THRESHOLDS, N_WORKSHOPS};
use crate::error::{Error, Result};
use crate::params::ParameterVector;

/// Logistic distribution function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln Λ(x) without overflow.
pub fn log_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Share of a workshop's effect that has reverted `delta` days after it, for rate `alpha` and horizon `horizon`.
///
/// Zero on the workshop day, one from the horizon on, and zero throughout for
/// non-positive rates.
pub fn decay(delta: f64, alpha: f64, horizon: f64) -> Result<f64> {
    if !(horizon > 0.0) {
        return Err(Error::invalid(format!("horizon {horizon} must be positive")));
    }
    if !(delta >= 0.0) {
        return Err(Error::invalid(format!("elapsed days {delta} must be nonnegative")));
    }
    Ok(decay_with_slope(delta, alpha, horizon).0)
}

/// Decay and its derivative with respect to `alpha`; inputs are assumed valid.
#[inline]
pub fn decay_with_slope(delta: f64, alpha: f64, horizon: f64) -> (f64, f64) {
    if alpha <= 0.0 {
        return (0.0, 0.0);
    }
    if delta >= horizon {
        return (1.0, 0.0);
    }
    let gap = 1.0 / (horizon - delta) - 1.0 / horizon;
    let remaining = (-alpha * gap).exp();
    ((1.0 - remaining).clamp(0.0, 1.0), gap * remaining)
}

/// Linear heterogeneity shared by the reversion magnitude and its rate:
/// `base + effects . x + sigma * draw`.
pub fn heterogeneous_value(base: f64, effects: &[f64], x: &[f64], sigma: f64, draw: f64) -> Result<f64> {
    if effects.len() != x.len() {
        return Err(Error::Dimension {
            what: "covariate effects",
            expected: effects.len(),
            found: x.len(),
        });
    }
    Ok(base + dot(effects, x) + sigma * draw)
}

/// Individual reversion magnitude ρ_i; no sign restriction.
pub fn individual_reversion(base: f64, effects: &[f64], x: &[f64], sigma: f64, draw: f64) -> Result<f64> {
    heterogeneous_value(base, effects, x, sigma, draw)
}

/// Individual reversion rate α_i.
pub fn individual_alpha(base: f64, effects: &[f64], x: &[f64], sigma: f64, draw: f64) -> Result<f64> {
    heterogeneous_value(base, effects, x, sigma, draw)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-workshop multipliers `I_w - ρ d(Δ_w)` for the first `occurred` workshops; zero afterwards.
#[inline]
pub fn workshop_multipliers(
    occurred: usize,
    deltas: &[f64; N_WORKSHOPS],
    rho: f64,
    alpha: f64,
    horizon: f64,
) -> [f64; N_WORKSHOPS] {
    let mut out = [0.0; N_WORKSHOPS];
    for w in 0..occurred {
        out[w] = 1.0 - rho * decay_with_slope(deltas[w], alpha, horizon).0;
    }
    out
}

/// Random terms of one individual under one draw.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IndividualRealization {
    pub rho: f64,
    pub alpha: f64,
    pub xi: [f64; N_STAKEHOLDERS],
    /// σ_η times the individual's common error-component draw.
    pub eta: f64,
}

/// Everything about one measurement occasion that enters the linear predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationContext<'a> {
    pub indicators: [u8; N_WORKSHOPS],
    pub deltas: [f64; N_WORKSHOPS],
    pub wave_column: Option<usize>,
    pub covariates: [&'a [f64]; N_STAKEHOLDERS],
    /// Zero-based calendar period; period 0 carries no effect.
    pub period: usize,
    pub horizon: f64,
}

/// Latent predictor V for each stakeholder, without the logistic disturbance.
pub fn linear_predictor(
    ctx: &ObservationContext<'_>,
    params: &ParameterVector,
    realization: &IndividualRealization,
) -> Result<[f64; N_STAKEHOLDERS]> {
    let occurred = ctx.indicators.iter().take_while(|i| **i == 1).count();
    if ctx.indicators[occurred..].iter().any(|i| *i != 0) {
        return Err(Error::invalid("workshop indicators must be a completed prefix"));
    }
    let mult = workshop_multipliers(occurred, &ctx.deltas, realization.rho, realization.alpha, ctx.horizon);
    let calendar = match ctx.period {
        0 => 0.0,
        p => *params.calendar_effects.get(p - 1).ok_or(Error::Dimension {
            what: "calendar period",
            expected: params.calendar_effects.len() + 1,
            found: p + 1,
        })?,
    };
    let mut v = [0.0; N_STAKEHOLDERS];
    for (s, out) in v.iter_mut().enumerate() {
        let gamma = &params.demographic_effects[s];
        if gamma.len() != ctx.covariates[s].len() {
            return Err(Error::Dimension {
                what: "demographic effects",
                expected: gamma.len(),
                found: ctx.covariates[s].len(),
            });
        }
        let wave = match ctx.wave_column {
            Some(c) => *params.wave_shifts[s].get(c).ok_or(Error::Dimension {
                what: "wave shifts",
                expected: params.wave_shifts[s].len(),
                found: c + 1,
            })?,
            None => 0.0,
        };
        *out = dot(&params.workshop_effects[s], &mult)
            + wave
            + dot(gamma, ctx.covariates[s])
            + realization.xi[s]
            + realization.eta
            + calendar;
    }
    Ok(v)
}

pub fn check_thresholds(tau: &[f64]) -> Result<()> {
    if tau.len() != N_THRESHOLDS {
        return Err(Error::Dimension {
            what: "thresholds",
            expected: N_THRESHOLDS,
            found: tau.len(),
        });
    }
    match tau.windows(2).position(|p| !(p[1] > p[0])) {
        Some(i) => Err(Error::ThresholdOrder { index: i + 1 }),
        None => Ok(()),
    }
}

/// Category probabilities of the ordered logit, categories 0..=10.
pub fn ordered_probs(v: f64, tau: &[f64]) -> Result<[f64; N_CATEGORIES]> {
    check_thresholds(tau)?;
    let mut out = [0.0; N_CATEGORIES];
    let mut below = 0.0;
    for (r, p) in out.iter_mut().enumerate() {
        let cum = if r < N_THRESHOLDS { logistic(tau[r] - v) } else { 1.0 };
        *p = (cum - below).max(0.0);
        below = cum;
    }
    Ok(out)
}

/// ln P(Y = r) and its derivatives with respect to the lower and upper thresholds
/// (`None` when the category is open on that side). The derivative with respect
/// to V is minus their sum.
#[inline]
pub fn log_category_prob(v: f64, tau: &[f64; N_THRESHOLDS], r: usize) -> (f64, f64, f64) {
    let lower = (r > 0).then(|| tau[r - 1] - v);
    let upper = (r < N_THRESHOLDS).then(|| tau[r] - v);
    match (lower, upper) {
        (None, Some(b)) => (log_logistic(b), 0.0, logistic(-b)),
        (Some(a), None) => (log_logistic(-a), -logistic(a), 0.0),
        (Some(a), Some(b)) if a > -30.0 && b < 30.0 => {
            let la = logistic(a);
            let lb = logistic(b);
            let p = lb - la;
            if p > FAST_PATH_MIN_PROB {
                return (p.ln(), -la * (1.0 - la) / p, lb * (1.0 - lb) / p);
            }
            log_interval_prob(a, b)
        }
        (Some(a), Some(b)) => log_interval_prob(a, b),
        (None, None) => unreachable!("eleven categories"),
    }
}

/// Below this probability the direct difference of logistic functions loses digits.
const FAST_PATH_MIN_PROB: f64 = 0.05;

#[inline]
fn log_interval_prob(a: f64, b: f64) -> (f64, f64, f64) {
    // Λ(b) − Λ(a) = Λ(b) Λ(−a) (1 − e^{a−b})
    let gap = b - a;
    let inv = 1.0 / gap.exp_m1();
    let logp = log_logistic(b) + log_logistic(-a) + (-(-gap).exp_m1()).ln();
    (logp, -logistic(a) - inv, logistic(-b) + inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_endpoints_and_spot_value() {
        assert_eq!(decay(0.0, 5.0, 17.0).unwrap(), 0.0);
        assert_eq!(decay(17.0, 119.17, 17.0).unwrap(), 1.0);
        assert_eq!(decay(30.0, 119.17, 17.0).unwrap(), 1.0);
        // 1 − exp(119.17 (1/17 − 1/9)), evaluated at 40 digits
        assert!((decay(8.0, 119.17, 17.0).unwrap() - 0.998_032_735_167_984_5).abs() < 1e-12);
        assert!(decay(3.0, 1.0, 0.0).is_err());
        assert!(decay(-1.0, 1.0, 17.0).is_err());
    }

    #[test]
    fn nonpositive_rate_never_reverts_before_horizon() {
        for delta in [0.0, 1.0, 8.0, 16.9] {
            assert_eq!(decay(delta, 0.0, 17.0).unwrap(), 0.0);
            assert_eq!(decay(delta, -3.0, 17.0).unwrap(), 0.0);
        }
        let alpha = individual_alpha(119.17, &[-112.69, -9.85], &[1.0, 1.0], 0.0, 0.0).unwrap();
        assert!(alpha < 0.0);
        assert_eq!(decay(10.0, alpha, 17.0).unwrap(), 0.0);
    }

    #[test]
    fn decay_slope_matches_difference_quotient() {
        for (delta, alpha) in [(3.0, 2.0), (8.0, 6.0), (14.0, 0.5)] {
            let h = 1e-6;
            let fd = (decay_with_slope(delta, alpha + h, 17.0).0 - decay_with_slope(delta, alpha - h, 17.0).0) / (2.0 * h);
            assert!((decay_with_slope(delta, alpha, 17.0).1 - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn reversion_and_rate_examples() {
        assert_eq!(individual_reversion(0.33, &[], &[], 0.0, 1.7).unwrap(), 0.33);
        let rho = individual_reversion(0.33, &[0.35, -0.39], &[1.0, 1.0], 0.0, 0.4).unwrap();
        assert!((rho - 0.29).abs() < 1e-12);
        assert_eq!(individual_alpha(119.17, &[], &[], 0.0, 0.0).unwrap(), 119.17);
        let alpha = individual_alpha(119.17, &[-112.69], &[1.0], 0.0, 0.0).unwrap();
        assert!((alpha - 6.48).abs() < 1e-12);
        assert!(individual_reversion(0.3, &[1.0], &[], 0.0, 0.0).is_err());
    }

    #[test]
    fn ordered_probs_examples() {
        let tau: Vec<f64> = (0..10).map(|k| -4.5 + k as f64).collect();
        let p = ordered_probs(0.0, &tau).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[5] - 0.244_918_662_403_709_1).abs() < 1e-12);
        let tau0: Vec<f64> = (0..10).map(|k| k as f64).collect();
        assert_eq!(ordered_probs(0.0, &tau0).unwrap()[0], 0.5);
        let mut bad = tau.clone();
        bad[4] = bad[3];
        assert!(matches!(ordered_probs(0.0, &bad), Err(Error::ThresholdOrder { index: 4 })));
    }

    #[test]
    fn log_category_prob_agrees_with_probabilities() {
        let tau: [f64; 10] = std::array::from_fn(|k| -3.0 + 0.7 * k as f64);
        for v in [-6.0, -0.3, 0.0, 2.2, 9.0] {
            let p = ordered_probs(v, &tau).unwrap();
            for r in 0..N_CATEGORIES {
                let (lp, da, db) = log_category_prob(v, &tau, r);
                assert!((lp.exp() - p[r]).abs() < 1e-14, "v={v} r={r}");
                let h = 1e-6;
                let fd_v = (log_category_prob(v + h, &tau, r).0 - log_category_prob(v - h, &tau, r).0) / (2.0 * h);
                assert!((fd_v + da + db).abs() < 1e-6 * (1.0 + fd_v.abs()));
            }
        }
    }

    #[test]
    fn multipliers_between_floor_and_one() {
        let deltas = [30.0, 16.0, 9.0, 2.0, 0.0];
        let m = workshop_multipliers(5, &deltas, 0.4, 3.0, 17.0);
        assert!((m[0] - 0.6).abs() < 1e-15);
        assert!(m.iter().all(|x| (0.6..=1.0).contains(x)));
        assert_eq!(m[4], 1.0);
        assert_eq!(workshop_multipliers(2, &deltas, 0.4, 3.0, 17.0)[2..], [0.0; 3]);
    }
}
