//! Posterior-predictive simulation of future TFR trajectories and their
//! quantile fans.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DataStore, Mode, PhaseSegmentation, TfrSeries};
use crate::error::{Error, Result};
use crate::kernel::{
    annual_decrement_mean, double_logistic_decrement, error_sd, phase2_step_mean,
    phase3_step_mean, AnnualParams, Phase2Params, Phase3Params, VarianceParams,
};
use crate::mcmc::diagnostics::{gelman_rubin, Rhat};
use crate::mcmc::phase2::Phase2Layout;
use crate::mcmc::phase3::{predictive_country_draw, Phase3Hyper, Phase3Layout};
use crate::pipeline::FitResult;
use crate::rng::{stream, StreamRng};

pub const DEFAULT_QUANTILES: [f64; 5] = [0.025, 0.1, 0.5, 0.9, 0.975];
pub const TFR_FLOOR: f64 = 0.5;
pub const MAX_RESAMPLE: usize = 50;
pub const DEFAULT_RHAT_BOUND: f64 = 1.1;
/// Below this many trajectories a projection is still produced, with a
/// warning.
pub const RECOMMENDED_TRAJECTORIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "II")]
    Two,
    #[serde(rename = "III")]
    Three,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationOptions {
    pub floor: f64,
    pub max_resample: usize,
    pub phase3_threshold: f64,
    /// Multiplies every random distortion; zero gives the deterministic
    /// recursion.
    pub noise_scale: f64,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions {
            floor: TFR_FLOOR,
            max_resample: MAX_RESAMPLE,
            phase3_threshold: crate::data::DEFAULT_PHASE3_THRESHOLD,
            noise_scale: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Phase3Source {
    Country(Phase3Params),
    /// No country-level Phase III estimate; `(μ, ρ)` come from the country
    /// layer at these hyperparameters.
    Hierarchy(Phase3Hyper),
}

/// Everything one trajectory needs from a single posterior draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorDraw {
    pub phase2: Option<Phase2Params>,
    pub variance: VarianceParams,
    pub annual: Option<AnnualParams>,
    pub phase3: Phase3Source,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub country_id: String,
    pub period_starts: Vec<i32>,
    pub values: Vec<f64>,
    pub phase_at: Vec<Phase>,
    pub draw_index: usize,
}

fn gaussian(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

/// `mean + sd·z`, redrawn while below the floor and clamped after
/// `max_resample` attempts.
fn floored_step(mean: f64, sd: f64, opts: &SimulationOptions, rng: &mut StreamRng) -> f64 {
    let sd = sd * opts.noise_scale;
    if sd == 0.0 {
        return mean.max(opts.floor);
    }
    for _ in 0..opts.max_resample.max(1) {
        let x = mean + sd * gaussian(rng);
        if x >= opts.floor {
            return x;
        }
    }
    opts.floor
}

/// Checks the two-consecutive-increases rule on the tail of `values`.
fn increases_below(values: &[f64], threshold: f64) -> bool {
    let n = values.len();
    n >= 3 && values[n - 3] < values[n - 2] && values[n - 2] < values[n - 1] && values[n - 1] < threshold
}

/// Five-year block means of an annual history, aligned to its first year.
fn block_means(values: &[f64]) -> Vec<f64> {
    values
        .chunks_exact(5)
        .map(|b| b.iter().sum::<f64>() / 5.0)
        .collect()
}

/// Simulates `horizon` periods beyond the last observation of `series`.
pub fn simulate_trajectory(
    series: &TfrSeries,
    seg: &PhaseSegmentation,
    draw: &PosteriorDraw,
    horizon: usize,
    rng: &mut StreamRng,
    opts: &SimulationOptions,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::InvalidConfig("projection horizon must be positive".into()));
    }
    let obs = series.observations();
    let last = *obs
        .last()
        .ok_or_else(|| Error::EmptySeries(series.country_id.clone()))?;
    let has_phase2_data = seg.phase2_range(obs.len()).len() >= 2;
    let mut phase = if seg.in_phase3() || !has_phase2_data {
        Phase::Three
    } else {
        Phase::Two
    };
    let theta = match (phase, draw.phase2) {
        (Phase::Two, None) => {
            return Err(Error::MissingParameters(format!(
                "Phase II parameters of {}",
                series.country_id
            )))
        }
        (_, p) => p,
    };
    let annual = series.mode() == Mode::Annual;
    if annual && phase == Phase::Two && draw.annual.is_none() {
        return Err(Error::MissingParameters(format!(
            "annual autocorrelation for {}",
            series.country_id
        )));
    }

    let mut ar: Option<Phase3Params> = None;
    let mut resolve_ar = |rng: &mut StreamRng| -> Phase3Params {
        *ar.get_or_insert_with(|| match draw.phase3 {
            Phase3Source::Country(q) => q,
            Phase3Source::Hierarchy(h) => predictive_country_draw(&h, rng),
        })
    };

    let step = last.period_length;
    let mut history: Vec<f64> = series.values();
    let mut values = Vec::with_capacity(horizon);
    let mut phase_at = Vec::with_capacity(horizon);
    let mut period_starts = Vec::with_capacity(horizon);
    let mut t = last.period_start;

    for _ in 0..horizon {
        let f = *history.last().expect("non-empty");
        let next = match phase {
            Phase::Two => {
                let p = theta.expect("checked above");
                let sd = error_sd(f, t, &draw.variance);
                if annual {
                    let a = draw.annual.expect("checked above");
                    let expected_dec = if history.len() >= 2 {
                        let prev = history[history.len() - 2];
                        annual_decrement_mean(prev, prev - f, &p, &a)
                    } else {
                        double_logistic_decrement(f, &p)
                    };
                    let dec_mean = f - expected_dec;
                    floored_step(dec_mean, sd, opts, rng)
                } else {
                    floored_step(phase2_step_mean(f, &p), sd, opts, rng)
                }
            }
            Phase::Three => {
                let q = resolve_ar(rng);
                floored_step(phase3_step_mean(f, &q), q.sigma_eps, opts, rng)
            }
        };
        t += step;
        history.push(next);
        if phase == Phase::Two {
            let p = theta.expect("checked above");
            let by_rule = if annual {
                let aligned = history.len() - history.len() % 5;
                history.len().is_multiple_of(5)
                    && increases_below(&block_means(&history[..aligned]), opts.phase3_threshold)
            } else {
                increases_below(&history, opts.phase3_threshold)
            };
            if by_rule || next < p.delta4 {
                phase = Phase::Three;
            }
        }
        values.push(next);
        phase_at.push(phase);
        period_starts.push(t);
    }

    Ok(Trajectory {
        country_id: series.country_id.clone(),
        period_starts,
        values,
        phase_at,
        draw_index: 0,
    })
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-period quantiles of a set of equally long trajectories.
pub fn quantile_fan(values: &[Vec<f64>], levels: &[f64]) -> Vec<Vec<f64>> {
    let periods = values.first().map_or(0, Vec::len);
    (0..periods)
        .map(|k| {
            let mut col: Vec<f64> = values.iter().map(|v| v[k]).collect();
            col.sort_by(f64::total_cmp);
            levels.iter().map(|&p| quantile_type7(&col, p)).collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub horizon_end_year: i32,
    pub trajectories: usize,
    pub quantile_levels: Vec<f64>,
    pub seed: u64,
    pub simulation: SimulationOptions,
    pub rhat_bound: f64,
    /// Project even when the convergence gate fails.
    pub force: bool,
    /// Hard lower bound on the trajectory count.
    pub min_trajectories: usize,
    pub keep_trajectories: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            horizon_end_year: 2050,
            trajectories: 2000,
            quantile_levels: DEFAULT_QUANTILES.to_vec(),
            seed: 2023,
            simulation: SimulationOptions::default(),
            rhat_bound: DEFAULT_RHAT_BOUND,
            force: false,
            min_trajectories: 1,
            keep_trajectories: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub country_id: String,
    pub country_name: String,
    pub period_starts: Vec<i32>,
    pub levels: Vec<f64>,
    /// period → level
    pub quantiles: Vec<Vec<f64>>,
    /// Share of trajectories in Phase III at each period.
    pub phase3_share: Vec<f64>,
    pub trajectory_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectories: Option<Vec<Trajectory>>,
}

/// Column name for a quantile level: 0.025 → `q025`, 0.1 → `q10`.
pub fn quantile_label(level: f64) -> String {
    let pct = level * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("q{:02}", pct.round() as i64)
    } else {
        format!("q{:03}", (pct * 10.0).round() as i64)
    }
}

impl ProjectionResult {
    /// Quantile at `level` for every period, if that level was computed.
    pub fn level(&self, level: f64) -> Option<Vec<f64>> {
        let i = self
            .levels
            .iter()
            .position(|l| (l - level).abs() < 1e-12)?;
        Some(self.quantiles.iter().map(|q| q[i]).collect())
    }

    pub fn period_index(&self, period_start: i32) -> Option<usize> {
        self.period_starts.iter().position(|&p| p == period_start)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("period_start");
        for l in &self.levels {
            out.push(',');
            out.push_str(&quantile_label(*l));
        }
        out.push('\n');
        for (p, q) in self.period_starts.iter().zip(&self.quantiles) {
            out.push_str(&p.to_string());
            for v in q {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn trajectories_csv(&self) -> Option<String> {
        let trajs = self.trajectories.as_ref()?;
        let mut out = String::from("country_id,trajectory,draw_index,period_start,tfr,phase\n");
        for (j, t) in trajs.iter().enumerate() {
            for k in 0..t.values.len() {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    t.country_id,
                    j,
                    t.draw_index,
                    t.period_starts[k],
                    t.values[k],
                    match t.phase_at[k] {
                        Phase::Two => "II",
                        Phase::Three => "III",
                    }
                ));
            }
        }
        Some(out)
    }
}

/// `R̂` for every pool-level coordinate of both chain sets.
pub fn convergence_report(fit: &FitResult) -> Result<Vec<(String, Rhat)>> {
    let mut out = Vec::new();
    for set in [&fit.phase2, &fit.phase3] {
        let pool: Vec<&str> = set.pool_coordinates();
        for (name, r) in gelman_rubin(set, |n| pool.contains(&n))? {
            out.push((format!("{}/{name}", set.kind.label()), r));
        }
    }
    Ok(out)
}

pub fn check_convergence(fit: &FitResult, bound: f64) -> Result<Vec<(String, Rhat)>> {
    let report = convergence_report(fit)?;
    let failing: Vec<String> = report
        .iter()
        .filter(|(_, r)| r.exceeds(bound))
        .map(|(n, r)| match r {
            Rhat::Value(v) => format!("{n}={v:.3}"),
            Rhat::NotApplicable => n.clone(),
        })
        .collect();
    if failing.is_empty() {
        Ok(report)
    } else {
        Err(Error::ConvergenceGate(format!(
            "R-hat above {bound}: {}",
            failing.join(", ")
        )))
    }
}

/// Number of whole periods between the series end and `horizon_end_year`.
pub fn horizon_periods(series: &TfrSeries, horizon_end_year: i32) -> usize {
    let Some(last) = series.last() else { return 0 };
    let len = last.period_length;
    let mut n = 0;
    let mut start = last.period_start + len;
    while start + len <= horizon_end_year {
        n += 1;
        start += len;
    }
    n
}

struct DrawSource<'a> {
    fit: &'a FitResult,
    p2: Phase2Layout,
    p3: Phase3Layout,
}

impl DrawSource<'_> {
    fn draw(&self, id: &str, j: usize) -> PosteriorDraw {
        let d2 = self.fit.phase2.draw(j % self.fit.phase2.total_draws());
        let d3 = self.fit.phase3.draw(j % self.fit.phase3.total_draws());
        let phase3 = match self.p3.params(d3, id) {
            Some(q) => Phase3Source::Country(q),
            None => Phase3Source::Hierarchy(self.p3.hyper(d3)),
        };
        PosteriorDraw {
            phase2: self.p2.params(d2, id),
            variance: self.p2.variance(d2),
            annual: self.p2.annual(d2),
            phase3,
        }
    }
}

fn project_country(
    series: &TfrSeries,
    seg: &PhaseSegmentation,
    source: &DrawSource<'_>,
    config: &ProjectionConfig,
) -> Result<ProjectionResult> {
    let horizon = horizon_periods(series, config.horizon_end_year);
    if horizon == 0 {
        return Err(Error::InvalidConfig(format!(
            "horizon end {} leaves no period to project for {}",
            config.horizon_end_year, series.country_id
        )));
    }
    let mut rng = stream(config.seed, &format!("project/{}", series.country_id));
    let mut trajectories = Vec::with_capacity(config.trajectories);
    for j in 0..config.trajectories {
        let draw = source.draw(&series.country_id, j);
        let mut t = simulate_trajectory(series, seg, &draw, horizon, &mut rng, &config.simulation)?;
        t.draw_index = j % source.fit.phase2.total_draws();
        trajectories.push(t);
    }
    let values: Vec<Vec<f64>> = trajectories.iter().map(|t| t.values.clone()).collect();
    let quantiles = quantile_fan(&values, &config.quantile_levels);
    let phase3_share = (0..horizon)
        .map(|k| {
            trajectories
                .iter()
                .filter(|t| t.phase_at[k] == Phase::Three)
                .count() as f64
                / trajectories.len() as f64
        })
        .collect();
    Ok(ProjectionResult {
        country_id: series.country_id.clone(),
        country_name: series.country_name.clone(),
        period_starts: trajectories[0].period_starts.clone(),
        levels: config.quantile_levels.clone(),
        quantiles,
        phase3_share,
        trajectory_count: trajectories.len(),
        trajectories: config.keep_trajectories.then_some(trajectories),
    })
}

/// Projects every pooled country (or the listed subset).
pub fn project(
    store: &DataStore,
    fit: &FitResult,
    config: &ProjectionConfig,
    countries: Option<&[String]>,
) -> Result<BTreeMap<String, ProjectionResult>> {
    if config.trajectories < config.min_trajectories.max(1) {
        return Err(Error::TooFewTrajectories {
            count: config.trajectories,
            floor: config.min_trajectories.max(1),
        });
    }
    if config.trajectories < RECOMMENDED_TRAJECTORIES {
        log::warn!(
            "only {} trajectories requested; quantiles will be noisy",
            config.trajectories
        );
    }
    if let Some(bad) = config
        .quantile_levels
        .iter()
        .find(|l| !(0.0..=1.0).contains(*l))
    {
        return Err(Error::InvalidConfig(format!("quantile level {bad} outside [0, 1]")));
    }
    if !config.force {
        check_convergence(fit, config.rhat_bound)?;
    }
    let source = DrawSource {
        fit,
        p2: Phase2Layout::new(&fit.phase2)?,
        p3: Phase3Layout::new(&fit.phase3)?,
    };
    let ids: Vec<String> = match countries {
        Some(list) => list.to_vec(),
        None => fit.pool.ids.iter().cloned().collect(),
    };
    for id in &ids {
        if !fit.pool.contains(id) {
            return Err(Error::MissingParameters(format!("{id} is not in the fitted pool")));
        }
    }
    let results: Vec<ProjectionResult> = ids
        .par_iter()
        .map(|id| {
            let series = store
                .get(id)
                .ok_or_else(|| Error::UnknownCountry(id.clone()))?;
            let seg = fit
                .phases
                .get(id)
                .ok_or_else(|| Error::MissingParameters(format!("segmentation of {id}")))?;
            project_country(series, seg, &source, config)
        })
        .collect::<Result<_>>()?;
    Ok(results
        .into_iter()
        .map(|r| (r.country_id.clone(), r))
        .collect())
}
