//! Goodness-of-fit and cross-validation scoring.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::{DataStore, Mode};
use crate::error::{Error, Result};
use crate::kernel::{
    annual_decrement_mean, double_logistic_decrement, error_sd, phase2_step_mean,
};
use crate::mcmc::phase2::Phase2Layout;
use crate::pipeline::{fit, FitConfig, FitResult};
use crate::projection::{project, ProjectionConfig};

/// Nominal level of every interval scored here.
pub const INTERVAL_LEVEL: f64 = 0.95;
const LOWER: f64 = (1.0 - INTERVAL_LEVEL) / 2.0;
const UPPER: f64 = 1.0 - LOWER;

fn check_pair(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::LengthMismatch { left, right });
    }
    if left == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Fraction of observations with `lo <= observed <= hi`.
pub fn coverage(observed: &[f64], intervals: &[(f64, f64)]) -> Result<f64> {
    check_pair(observed.len(), intervals.len())?;
    let inside = observed
        .iter()
        .zip(intervals)
        .filter(|&(&x, &(lo, hi))| lo <= x && x <= hi)
        .count();
    Ok(inside as f64 / observed.len() as f64)
}

pub fn rmse(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair(observed.len(), predicted.len())?;
    let ss: f64 = observed
        .iter()
        .zip(predicted)
        .map(|(o, p)| (o - p).powi(2))
        .sum();
    Ok((ss / observed.len() as f64).sqrt())
}

pub fn mae(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair(observed.len(), predicted.len())?;
    let sa: f64 = observed.iter().zip(predicted).map(|(o, p)| (o - p).abs()).sum();
    Ok(sa / observed.len() as f64)
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Equal-weight mixture of normals `(mean, sd)`; `sd == 0` is a point mass.
#[derive(Clone, Debug)]
pub struct NormalMixture {
    components: Vec<(f64, f64)>,
}

impl NormalMixture {
    pub fn new(components: Vec<(f64, f64)>) -> Self {
        assert!(!components.is_empty(), "empty mixture");
        NormalMixture { components }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let total: f64 = self
            .components
            .iter()
            .map(|&(m, s)| {
                if s > 0.0 {
                    normal_cdf((x - m) / s)
                } else if x >= m {
                    1.0
                } else {
                    0.0
                }
            })
            .sum();
        total / self.components.len() as f64
    }

    /// Smallest `x` with `cdf(x) >= p`, to within bisection precision.
    pub fn quantile(&self, p: f64) -> f64 {
        if self.components.iter().all(|c| c.1 == 0.0) {
            let mut means: Vec<f64> = self.components.iter().map(|c| c.0).collect();
            means.sort_by(f64::total_cmp);
            let n = means.len();
            let k = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
            return means[k];
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &(m, s) in &self.components {
            lo = lo.min(m - 12.0 * s);
            hi = hi.max(m + 12.0 * s);
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) >= p {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }
}

/// Inclusive span of years; a transition counts when both its periods lie
/// inside.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: i32,
    pub end: i32,
}

impl Window {
    pub fn label(&self) -> String {
        format!("{}-{}", self.start, self.end)
    }
}

/// One scored Phase II transition `f_t → f_{t+1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub country_id: String,
    /// Start of the period holding `f_t`.
    pub period_start: i32,
    pub observed: f64,
    pub predicted: f64,
    pub lower: f64,
    pub upper: f64,
    pub covered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountryFit {
    pub country_id: String,
    pub country_name: String,
    pub transitions: usize,
    pub coverage: f64,
    pub rmse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub window: Window,
    pub window_label: String,
    pub countries: Vec<CountryFit>,
    pub total_coverage: f64,
    pub total_rmse: f64,
    pub total_mae: f64,
    pub records: Vec<TransitionRecord>,
}

fn summarize(records: &[TransitionRecord]) -> Result<(f64, f64, f64)> {
    let obs: Vec<f64> = records.iter().map(|r| r.observed).collect();
    let pred: Vec<f64> = records.iter().map(|r| r.predicted).collect();
    let iv: Vec<(f64, f64)> = records.iter().map(|r| (r.lower, r.upper)).collect();
    Ok((coverage(&obs, &iv)?, rmse(&obs, &pred)?, mae(&obs, &pred)?))
}

/// One-step-ahead posterior predictive scoring of every in-window Phase II
/// transition of the countries in the Phase II chains.
pub fn fit_diagnostics(store: &DataStore, fit: &FitResult, window: Window) -> Result<FitReport> {
    let layout = Phase2Layout::new(&fit.phase2)?;
    let draws: Vec<&[f64]> = fit.phase2.draws().collect();
    let annual = store.mode() == Mode::Annual;

    let per_country: Vec<(String, String, Vec<TransitionRecord>)> = fit
        .phase2
        .countries
        .par_iter()
        .map(|id| {
            let series = store
                .get(id)
                .ok_or_else(|| Error::UnknownCountry(id.clone()))?;
            let seg = fit
                .phases
                .get(id)
                .ok_or_else(|| Error::MissingParameters(format!("segmentation of {id}")))?;
            let obs = series.observations();
            let range = seg.phase2_range(obs.len());
            let len = series.mode().period_length();
            let mut records = Vec::new();
            for i in range.start..range.end.saturating_sub(1) {
                let t = obs[i].period_start;
                if t < window.start || t + 2 * len > window.end {
                    continue;
                }
                let f = obs[i].tfr;
                let components: Vec<(f64, f64)> = draws
                    .iter()
                    .map(|d| {
                        let p = layout.params(d, id).expect("country in layout");
                        let v = layout.variance(d);
                        let mean = if annual && i > range.start {
                            let a = layout.annual(d).expect("annual chains carry phi");
                            let prev = obs[i - 1].tfr;
                            f - annual_decrement_mean(prev, prev - f, &p, &a)
                        } else if annual {
                            f - double_logistic_decrement(f, &p)
                        } else {
                            phase2_step_mean(f, &p)
                        };
                        (mean, error_sd(f, t, &v))
                    })
                    .collect();
                let mix = NormalMixture::new(components);
                let observed = obs[i + 1].tfr;
                let lower = mix.quantile(LOWER);
                let upper = mix.quantile(UPPER);
                records.push(TransitionRecord {
                    country_id: id.clone(),
                    period_start: t,
                    observed,
                    predicted: mix.quantile(0.5),
                    lower,
                    upper,
                    covered: lower <= observed && observed <= upper,
                });
            }
            Ok((id.clone(), series.country_name.clone(), records))
        })
        .collect::<Result<_>>()?;

    let mut countries = Vec::new();
    let mut all = Vec::new();
    for (id, name, records) in per_country {
        if records.is_empty() {
            continue;
        }
        let (c, r, m) = summarize(&records)?;
        countries.push(CountryFit {
            country_id: id,
            country_name: name,
            transitions: records.len(),
            coverage: c,
            rmse: r,
            mae: m,
        });
        all.extend(records);
    }
    if all.is_empty() {
        return Err(Error::EmptyWindow(window.label()));
    }
    let (total_coverage, total_rmse, total_mae) = summarize(&all)?;
    Ok(FitReport {
        window,
        window_label: window.label(),
        countries,
        total_coverage,
        total_rmse,
        total_mae,
        records: all,
    })
}

impl FitReport {
    pub fn country(&self, id: &str) -> Option<&CountryFit> {
        self.countries.iter().find(|c| c.country_id == id)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Goodness of fit, {}", self.window_label);
        let _ = writeln!(out, "{:<28} {:>6} {:>12} {:>8} {:>8}", "Country", "n", "Coverage 95%", "RMSE", "MAE");
        for c in &self.countries {
            let _ = writeln!(
                out,
                "{:<28} {:>6} {:>11.0}% {:>8.4} {:>8.4}",
                c.country_name,
                c.transitions,
                100.0 * c.coverage,
                c.rmse,
                c.mae
            );
        }
        let _ = writeln!(
            out,
            "{:<28} {:>6} {:>11.0}% {:>8.4} {:>8.4}",
            "Total",
            self.records.len(),
            100.0 * self.total_coverage,
            self.total_rmse,
            self.total_mae
        );
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    pub fit: FitConfig,
    pub projection: ProjectionConfig,
    /// Countries to score; all projected countries when `None`.
    pub countries: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutPeriod {
    pub country_id: String,
    pub period_start: i32,
    pub observed: f64,
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
    pub inside: bool,
    pub group: String,
}

/// Ten-year block of held-out periods, contained when every period is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutGroup {
    pub country_id: String,
    pub label: String,
    pub periods: usize,
    pub inside: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub cutoff: i32,
    pub periods: Vec<HoldoutPeriod>,
    pub groups: Vec<HoldoutGroup>,
    pub coverage: f64,
}

fn group_label(cutoff: i32, period_start: i32) -> String {
    let k = (period_start - cutoff).div_euclid(10);
    format!("{}-{}", cutoff + 10 * k + 1, cutoff + 10 * (k + 1))
}

/// Fits and projects from the data up to `cutoff`, then scores the held-out
/// observations against the 95% fans.
pub fn cross_validate(store: &DataStore, cutoff: i32, config: &ValidationConfig) -> Result<HoldoutReport> {
    let (first, last) = match (store.first_period(), store.last_period_end()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::EmptyInput),
    };
    let len = store.mode().period_length();
    let out_of_range = Error::CutoffOutOfRange { cutoff, first, last };
    // At least two whole held-out periods must follow the cutoff.
    if cutoff <= first || cutoff + 2 * len > last {
        return Err(out_of_range);
    }
    let truncated = store.truncated(cutoff);
    let fitted = fit(&truncated, &config.fit)?;
    let projection = ProjectionConfig {
        horizon_end_year: last,
        ..config.projection.clone()
    };
    let fans = project(&truncated, &fitted, &projection, config.countries.as_deref())?;

    let mut periods = Vec::new();
    for (id, fan) in &fans {
        let lower = fan
            .level(LOWER)
            .ok_or_else(|| Error::InvalidConfig(format!("quantile level {LOWER} not projected")))?;
        let upper = fan
            .level(UPPER)
            .ok_or_else(|| Error::InvalidConfig(format!("quantile level {UPPER} not projected")))?;
        let median = fan
            .level(0.5)
            .ok_or_else(|| Error::InvalidConfig("median not projected".into()))?;
        let series = store.get(id).ok_or_else(|| Error::UnknownCountry(id.clone()))?;
        for (k, &start) in fan.period_starts.iter().enumerate() {
            let Some(i) = series.index_of_period(start) else { continue };
            let observed = series.observations()[i].tfr;
            periods.push(HoldoutPeriod {
                country_id: id.clone(),
                period_start: start,
                observed,
                lower: lower[k],
                median: median[k],
                upper: upper[k],
                inside: lower[k] <= observed && observed <= upper[k],
                group: group_label(cutoff, start),
            });
        }
    }
    if periods.is_empty() {
        return Err(out_of_range);
    }
    let mut grouped: BTreeMap<(String, String), (usize, bool)> = BTreeMap::new();
    for p in &periods {
        let e = grouped
            .entry((p.country_id.clone(), p.group.clone()))
            .or_insert((0, true));
        e.0 += 1;
        e.1 &= p.inside;
    }
    let groups = grouped
        .into_iter()
        .map(|((country_id, label), (n, inside))| HoldoutGroup {
            country_id,
            label,
            periods: n,
            inside,
        })
        .collect();
    let coverage = periods.iter().filter(|p| p.inside).count() as f64 / periods.len() as f64;
    Ok(HoldoutReport {
        cutoff,
        periods,
        groups,
        coverage,
    })
}

impl HoldoutReport {
    pub fn country_periods<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a HoldoutPeriod> + 'a {
        self.periods.iter().filter(move |p| p.country_id == id)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Cross-validation, projections from {}", self.cutoff);
        let _ = writeln!(
            out,
            "{:<8} {:>7} {:>9} {:>8} {:>8} {:>8} {:>7}",
            "Country", "Period", "Observed", "q025", "q50", "q975", "Inside"
        );
        for p in &self.periods {
            let _ = writeln!(
                out,
                "{:<8} {:>7} {:>9.3} {:>8.3} {:>8.3} {:>8.3} {:>7}",
                p.country_id,
                p.period_start,
                p.observed,
                p.lower,
                p.median,
                p.upper,
                if p.inside { "yes" } else { "no" }
            );
        }
        for g in &self.groups {
            let _ = writeln!(
                out,
                "{:<8} {:>15} {}",
                g.country_id,
                g.label,
                if g.inside { "contained" } else { "not contained" }
            );
        }
        let _ = writeln!(out, "Coverage {:.0}%", 100.0 * self.coverage);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let iv = [(0.0, 1.0); 4];
        assert_eq!(coverage(&[0.5, 0.2, 0.9, 0.1], &iv).unwrap(), 1.0);
        assert_eq!(coverage(&[0.5, 0.2, 1.9, 0.1], &iv).unwrap(), 0.75);
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[1.1, 0.9], &[1.0, 1.0]).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((mae(&[1.1, 0.7], &[1.0, 1.0]).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn metric_errors() {
        assert!(matches!(coverage(&[], &[]), Err(Error::EmptyInput)));
        assert!(matches!(
            rmse(&[1.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch { left: 1, right: 2 })
        ));
        assert!(mae(&[], &[]).is_err());
    }

    #[test]
    fn mixture_quantiles() {
        let single = NormalMixture::new(vec![(1.0, 0.5)]);
        assert!((single.quantile(0.975) - (1.0 + 0.5 * 1.959_963_984_540_054)).abs() < 1e-9);
        assert!((single.quantile(0.5) - 1.0).abs() < 1e-12);
        let point = NormalMixture::new(vec![(2.0, 0.0)]);
        assert_eq!(point.quantile(0.025), 2.0);
        assert_eq!(point.quantile(0.975), 2.0);
        let sym = NormalMixture::new(vec![(-1.0, 1.0), (1.0, 1.0)]);
        assert!(sym.quantile(0.5).abs() < 1e-12);
    }

    #[test]
    fn decade_groups() {
        assert_eq!(group_label(2000, 2000), "2001-2010");
        assert_eq!(group_label(2000, 2005), "2001-2010");
        assert_eq!(group_label(2000, 2010), "2011-2020");
        assert_eq!(group_label(2000, 2015), "2011-2020");
    }
}
