//! Model kernels: the double-logistic decrement, the heteroscedastic error
//! scale, one-step means and Gaussian log-likelihoods for both phases, and
//! the annual autoregressive decrement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `2 ln 9`: maps a logistic's 10%-90% rise onto its width parameter.
pub const TWO_LN_9: f64 = 4.394_449_154_672_439;

/// Periods starting before this year get the variance multiplier `c0`.
pub const VARIANCE_BREAK_YEAR: i32 = 1975;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Country-level double-logistic parameters `(Δ1, Δ2, Δ3, Δ4, d)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase2Params {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub delta4: f64,
    pub d: f64,
}

impl Phase2Params {
    pub fn new(delta1: f64, delta2: f64, delta3: f64, delta4: f64, d: f64) -> Result<Self> {
        let p = Phase2Params {
            delta1,
            delta2,
            delta3,
            delta4,
            d,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.delta1, self.delta2, self.delta3, self.delta4, self.d];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "Phase II parameters must be positive: {self:?}"
            )))
        }
    }

    /// Sum of the four widths; the TFR level at which the transition starts.
    pub fn start_level(&self) -> f64 {
        self.delta1 + self.delta2 + self.delta3 + self.delta4
    }
}

/// Parameters of the error scale `σ(t, f)`: piecewise linear in the TFR level
/// with its peak at `s`, a multiplier for early periods and a hard floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceParams {
    pub sigma0: f64,
    pub s: f64,
    pub a: f64,
    pub b: f64,
    pub c0: f64,
    pub sd_floor: f64,
}

impl Default for VarianceParams {
    fn default() -> Self {
        VarianceParams {
            sigma0: 0.1,
            s: 3.5,
            a: 0.01,
            b: 0.02,
            c0: 1.25,
            sd_floor: 0.01,
        }
    }
}

impl VarianceParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma0 > 0.0
            && self.a >= 0.0
            && self.b >= 0.0
            && self.c0 >= 1.0
            && self.sd_floor > 0.0
            && self.s.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "invalid variance parameters: {self:?}"
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase3Params {
    pub mu: f64,
    pub rho: f64,
    pub sigma_eps: f64,
}

impl Phase3Params {
    pub fn validate(&self) -> Result<()> {
        if self.mu >= 0.0 && self.rho >= 0.0 && self.sigma_eps >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "invalid Phase III parameters: {self:?}"
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnualParams {
    pub phi: f64,
}

impl AnnualParams {
    pub fn validate(&self) -> Result<()> {
        if (0.0..1.0).contains(&self.phi) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "phi must lie in [0, 1): {}",
                self.phi
            )))
        }
    }
}

/// `ln cosh(x)` without overflow.
fn ln_cosh(x: f64) -> f64 {
    let ax = x.abs();
    ax + (-2.0 * ax).exp().ln_1p() - std::f64::consts::LN_2
}

/// `logistic(x2) - logistic(x1)`, accurate when both sit on the same plateau.
fn logistic_difference(x2: f64, x1: f64) -> f64 {
    let half_gap = 0.5 * (x2 - x1);
    if x1.abs() < 700.0 && x2.abs() < 700.0 {
        half_gap.sinh() / (2.0 * (0.5 * x1).cosh() * (0.5 * x2).cosh())
    } else {
        let ln_sinh = if half_gap.abs() < 1.0 {
            half_gap.abs().sinh().ln()
        } else {
            half_gap.abs() + (-(-2.0 * half_gap.abs()).exp()).ln_1p() - std::f64::consts::LN_2
        };
        let mag = (ln_sinh - std::f64::consts::LN_2 - ln_cosh(0.5 * x1) - ln_cosh(0.5 * x2)).exp();
        mag.copysign(half_gap)
    }
}

/// Expected five-year decrement `g(f | θ)` at TFR level `f`.
///
/// ```text
/// g(f) = -d / (1 + exp(-2 ln9 (f - (Δ2+Δ3+Δ4) + 0.5 Δ1) / Δ1))
///      +  d / (1 + exp(-2 ln9 (f - Δ4 - 0.5 Δ3) / Δ3))
/// ```
pub fn double_logistic_decrement(f: f64, p: &Phase2Params) -> f64 {
    let upper = p.delta2 + p.delta3 + p.delta4 - 0.5 * p.delta1;
    let lower = p.delta4 + 0.5 * p.delta3;
    let x1 = TWO_LN_9 * (f - upper) / p.delta1;
    let x2 = TWO_LN_9 * (f - lower) / p.delta3;
    p.d * logistic_difference(x2, x1)
}

pub fn phase2_step_mean(f: f64, p: &Phase2Params) -> f64 {
    f - double_logistic_decrement(f, p)
}

pub fn error_sd(f: f64, period_start: i32, v: &VarianceParams) -> f64 {
    let linear = if f > v.s {
        v.sigma0 - v.a * (f - v.s)
    } else {
        v.sigma0 - v.b * (v.s - f)
    };
    let multiplier = if period_start < VARIANCE_BREAK_YEAR {
        v.c0
    } else {
        1.0
    };
    multiplier * linear.max(v.sd_floor)
}

#[inline]
pub fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

/// A run of consecutive observations `(period_start, tfr)`.
pub type Segment<'a> = &'a [(i32, f64)];

fn check_segment(segment: Segment<'_>) -> Result<()> {
    if segment.len() < 2 {
        return Err(Error::SegmentTooShort {
            len: segment.len(),
            min: 2,
        });
    }
    Ok(())
}

/// Gaussian log-density of all Phase II transitions in `segment`.
pub fn phase2_loglik(segment: Segment<'_>, p: &Phase2Params, v: &VarianceParams) -> Result<f64> {
    check_segment(segment)?;
    Ok(phase2_loglik_unchecked(segment, p, v))
}

pub(crate) fn phase2_loglik_unchecked(
    segment: Segment<'_>,
    p: &Phase2Params,
    v: &VarianceParams,
) -> f64 {
    segment
        .windows(2)
        .map(|w| {
            let (t, f) = w[0];
            normal_logpdf(w[1].1, phase2_step_mean(f, p), error_sd(f, t, v))
        })
        .sum()
}

pub fn phase3_step_mean(f: f64, q: &Phase3Params) -> f64 {
    q.mu + q.rho * (f - q.mu)
}

pub fn phase3_loglik(segment: Segment<'_>, q: &Phase3Params) -> Result<f64> {
    check_segment(segment)?;
    if !(q.sigma_eps > 0.0) {
        return Err(Error::InvalidParameter(
            "sigma_eps must be positive for a likelihood".into(),
        ));
    }
    Ok(phase3_loglik_unchecked(segment, q))
}

pub(crate) fn phase3_loglik_unchecked(segment: Segment<'_>, q: &Phase3Params) -> f64 {
    segment
        .windows(2)
        .map(|w| normal_logpdf(w[1].1, phase3_step_mean(w[0].1, q), q.sigma_eps))
        .sum()
}

/// Expected decrement in the next year given last year's level and
/// decrement. The decrement is the decline `f_t - f_{t+1}`.
pub fn annual_decrement_mean(
    prev_f: f64,
    prev_decrement: f64,
    p: &Phase2Params,
    a: &AnnualParams,
) -> f64 {
    let f_next = prev_f - prev_decrement;
    double_logistic_decrement(f_next, p)
        + a.phi * (prev_decrement - double_logistic_decrement(prev_f, p))
}

/// Annual Phase II log-density. The first transition has no predecessor and
/// is scored against the plain double-logistic decrement.
pub fn annual_phase2_loglik(
    segment: Segment<'_>,
    p: &Phase2Params,
    v: &VarianceParams,
    a: &AnnualParams,
) -> Result<f64> {
    check_segment(segment)?;
    Ok(annual_phase2_loglik_unchecked(segment, p, v, a))
}

pub(crate) fn annual_phase2_loglik_unchecked(
    segment: Segment<'_>,
    p: &Phase2Params,
    v: &VarianceParams,
    a: &AnnualParams,
) -> f64 {
    let mut total = 0.0;
    for i in 0..segment.len() - 1 {
        let (t, f) = segment[i];
        let dec = f - segment[i + 1].1;
        let mean = if i == 0 {
            double_logistic_decrement(f, p)
        } else {
            let (_, prev_f) = segment[i - 1];
            annual_decrement_mean(prev_f, prev_f - f, p, a)
        };
        total += normal_logpdf(dec, mean, error_sd(f, t, v));
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Phase2Params {
        Phase2Params::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn exact_decrement_values() {
        let p = unit();
        assert!((double_logistic_decrement(2.5, &p) - 20.0 / 41.0).abs() < 1e-12);
        assert!((double_logistic_decrement(1.5, &p) - 20.0 / 41.0).abs() < 1e-12);
        assert!((phase2_step_mean(2.5, &p) - (2.5 - 20.0 / 41.0)).abs() < 1e-12);
    }

    #[test]
    fn far_tail_stays_positive() {
        let g = double_logistic_decrement(10.0, &unit());
        assert!(g > 0.0 && g < 1e-6, "{g}");
        let g = double_logistic_decrement(4000.0, &unit());
        assert!((0.0..1e-6).contains(&g), "{g}");
    }

    #[test]
    fn vanishing_d_is_identity() {
        let p = Phase2Params::new(1.0, 1.0, 1.0, 1.0, 1e-12).unwrap();
        assert!((phase2_step_mean(3.0, &p) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn error_sd_branches() {
        let v = VarianceParams {
            sigma0: 0.1,
            s: 2.0,
            a: 0.5,
            b: 0.02,
            c0: 1.5,
            sd_floor: 0.01,
        };
        assert_eq!(error_sd(2.0, 2000, &v), 0.1);
        assert!((error_sd(2.0, 1960, &v) - 0.15).abs() < 1e-15);
        assert_eq!(error_sd(5.0, 2000, &v), 0.01);
    }

    #[test]
    fn zero_residual_loglik() {
        let v = VarianceParams {
            sigma0: 0.1,
            s: 2.5,
            a: 0.0,
            b: 0.0,
            c0: 1.0,
            sd_floor: 0.01,
        };
        let p = unit();
        let seg = [(2000, 2.5), (2005, phase2_step_mean(2.5, &p))];
        let ll = phase2_loglik(&seg, &p, &v).unwrap();
        let expected = (1.0 / (0.1 * (2.0 * std::f64::consts::PI).sqrt())).ln();
        assert!((ll - expected).abs() < 1e-12);
        assert!(matches!(
            phase2_loglik(&seg[..1], &p, &v),
            Err(Error::SegmentTooShort { .. })
        ));
    }

    #[test]
    fn phase3_examples() {
        let q = Phase3Params {
            mu: 1.7,
            rho: 0.9,
            sigma_eps: 0.1,
        };
        assert!((phase3_step_mean(1.0, &q) - 1.07).abs() < 1e-12);
        assert_eq!(phase3_step_mean(1.7, &q), 1.7);
        let q0 = Phase3Params { rho: 0.0, ..q };
        assert_eq!(phase3_step_mean(0.3, &q0), 1.7);
    }

    #[test]
    fn annual_decrement_examples() {
        let p = unit();
        let f = 2.4;
        let g_next = |d: f64| double_logistic_decrement(f - d, &p);
        let phi0 = AnnualParams { phi: 0.0 };
        assert_eq!(annual_decrement_mean(f, 0.3, &p, &phi0), g_next(0.3));

        let gf = double_logistic_decrement(f, &p);
        let phi = AnnualParams { phi: 0.7 };
        assert!((annual_decrement_mean(f, gf, &p, &phi) - g_next(gf)).abs() < 1e-15);

        let half = AnnualParams { phi: 0.5 };
        let prev = gf + 0.2;
        assert!((annual_decrement_mean(f, prev, &p, &half) - (g_next(prev) + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn parameter_validation() {
        assert!(Phase2Params::new(1.0, 0.0, 1.0, 1.0, 1.0).is_err());
        assert!(AnnualParams { phi: 1.0 }.validate().is_err());
        assert!(VarianceParams::default().validate().is_ok());
    }
}
