//! Phase II hierarchy: country double-logistic parameters on unconstrained
//! scales, pool-level normals over those scales, and the error-scale
//! parameters shared by the pool.
//!
//! Country coordinates are `(z_d, z_Δ4, z_s1, z_s2)`:
//!
//! ```text
//! d   = d_lo  + (d_hi  - d_lo)  · logistic(z_d)
//! Δ4  = Δ4_lo + (Δ4_hi - Δ4_lo) · logistic(z_Δ4)
//! (Δ1, Δ2, Δ3) = softmax(z_s1, z_s2, 0) · (U - Δ4)
//! ```
//!
//! where `U` is the observed TFR at the start of Phase II. Each coordinate has
//! a pool-level `N(mean, sd²)` with `mean ~ U(-5, 5)` and `sd ~ U(0, 2)`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::data::{DataStore, Mode, PhaseSegmentation};
use crate::error::{Error, Result};
use crate::kernel::{
    annual_phase2_loglik_unchecked, normal_logpdf, phase2_loglik_unchecked, AnnualParams,
    Phase2Params, VarianceParams,
};
use crate::rng::StreamRng;

use super::adapt::AdaptiveProposal;
use super::chain::{ChainKind, ChainSet, LOG_POSTERIOR};
use super::{accept, run_chains, tnorm, GibbsSampler, McmcConfig, VarianceSetting};

pub const COORDINATES: [&str; 4] = ["d", "delta4", "share1", "share2"];
pub const VARIANCE_NAMES: [&str; 5] = ["sigma0", "S", "a", "b", "c0"];

const D_RANGE_FIVE_YEAR: (f64, f64) = (0.25, 2.5);
const D_RANGE_ANNUAL: (f64, f64) = (0.05, 0.5);
const DELTA4_RANGE: (f64, f64) = (0.5, 2.5);
/// Room kept between Δ4 and the start level so Δ1..Δ3 stay positive.
const DELTA4_MARGIN: f64 = 0.1;
const HYPER_MEAN_BOUND: f64 = 5.0;
const HYPER_SD_MAX: f64 = 2.0;

/// Uniform prior boxes for the error-scale parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariancePrior {
    pub sigma0_max: f64,
    pub s: (f64, f64),
    pub a_max: f64,
    pub b_max: f64,
    pub c0_max: f64,
}

impl VariancePrior {
    pub fn for_mode(mode: Mode) -> Self {
        VariancePrior {
            sigma0_max: match mode {
                Mode::FiveYear => 0.5,
                Mode::Annual => 0.2,
            },
            s: (1.0, 7.0),
            a_max: 0.5,
            b_max: 0.5,
            c0_max: 5.0,
        }
    }

    fn contains(&self, v: &[f64; 5]) -> bool {
        let [sigma0, s, a, b, c0] = *v;
        sigma0 > 0.0
            && sigma0 <= self.sigma0_max
            && s >= self.s.0
            && s <= self.s.1
            && (0.0..=self.a_max).contains(&a)
            && (0.0..=self.b_max).contains(&b)
            && (1.0..=self.c0_max).contains(&c0)
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Per-country map between raw coordinates and valid [`Phase2Params`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase2Transform {
    pub start_level: f64,
    pub d_range: (f64, f64),
    pub delta4_range: (f64, f64),
}

impl Phase2Transform {
    pub fn new(mode: Mode, start_level: f64) -> Result<Self> {
        let hi = DELTA4_RANGE.1.min(start_level - DELTA4_MARGIN);
        if !(hi > DELTA4_RANGE.0) {
            return Err(Error::InvalidParameter(format!(
                "Phase II start level {start_level} leaves no room for Δ4"
            )));
        }
        Ok(Phase2Transform {
            start_level,
            d_range: match mode {
                Mode::FiveYear => D_RANGE_FIVE_YEAR,
                Mode::Annual => D_RANGE_ANNUAL,
            },
            delta4_range: (DELTA4_RANGE.0, hi),
        })
    }

    pub fn params(&self, raw: &[f64; 4]) -> Phase2Params {
        let (dl, dh) = self.d_range;
        let (ql, qh) = self.delta4_range;
        let d = dl + (dh - dl) * logistic(raw[0]);
        let delta4 = ql + (qh - ql) * logistic(raw[1]);
        let m = raw[2].max(raw[3]).max(0.0);
        let e = [(raw[2] - m).exp(), (raw[3] - m).exp(), (-m).exp()];
        let total: f64 = e.iter().sum();
        let span = self.start_level - delta4;
        Phase2Params {
            delta1: span * e[0] / total,
            delta2: span * e[1] / total,
            delta3: span * e[2] / total,
            delta4,
            d,
        }
    }

    /// Inverse of [`params`](Self::params) for parameters produced by it.
    pub fn raw(&self, p: &Phase2Params) -> [f64; 4] {
        let (dl, dh) = self.d_range;
        let (ql, qh) = self.delta4_range;
        [
            logit((p.d - dl) / (dh - dl)),
            logit((p.delta4 - ql) / (qh - ql)),
            (p.delta1 / p.delta3).ln(),
            (p.delta2 / p.delta3).ln(),
        ]
    }
}

/// State of the Phase II hierarchy.
#[derive(Clone, Debug, PartialEq)]
pub struct Phase2Hierarchy {
    pub countries: Vec<String>,
    pub transforms: Vec<Phase2Transform>,
    pub raw: Vec<[f64; 4]>,
    pub means: [f64; 4],
    pub sds: [f64; 4],
}

impl Phase2Hierarchy {
    pub fn country_params(&self, i: usize) -> Phase2Params {
        self.transforms[i].params(&self.raw[i])
    }

    fn log_prior(&self) -> f64 {
        self.raw
            .iter()
            .map(|r| {
                (0..4)
                    .map(|k| normal_logpdf(r[k], self.means[k], self.sds[k]))
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Gamma(`shape`, `rate`) conditioned on `x >= min`. The prior bound rarely
/// binds, so plain rejection is tried before inverting the cdf.
fn truncated_gamma(rng: &mut StreamRng, shape: f64, rate: f64, min: f64) -> f64 {
    if rate <= 0.0 {
        return f64::MAX;
    }
    let gamma = rand_distr::Gamma::new(shape, rate.recip()).expect("positive shape and scale");
    for _ in 0..64 {
        let x: f64 = gamma.sample(rng);
        if x >= min {
            return x;
        }
    }
    let dist = statrs::distribution::Gamma::new(shape, rate).expect("positive shape and rate");
    let lo = dist.cdf(min);
    let u: f64 = rng.random();
    dist.inverse_cdf(lo + u * (1.0 - lo)).max(min)
}

struct CountryData {
    segment: Vec<(i32, f64)>,
}

struct Phase2Sampler<'a> {
    data: &'a [CountryData],
    annual: bool,
    state: Phase2Hierarchy,
    params: Vec<Phase2Params>,
    ll: Vec<f64>,
    variance: VarianceParams,
    estimate_variance: bool,
    prior: VariancePrior,
    phi: f64,
    country_props: Vec<AdaptiveProposal>,
    hyper_props: Vec<AdaptiveProposal>,
    variance_prop: AdaptiveProposal,
    phi_prop: AdaptiveProposal,
}

fn variance_vec(v: &VarianceParams) -> [f64; 5] {
    [v.sigma0, v.s, v.a, v.b, v.c0]
}

fn variance_from(v: &[f64; 5], floor: f64) -> VarianceParams {
    VarianceParams {
        sigma0: v[0],
        s: v[1],
        a: v[2],
        b: v[3],
        c0: v[4],
        sd_floor: floor,
    }
}

impl<'a> Phase2Sampler<'a> {
    fn country_ll(&self, c: usize, p: &Phase2Params, v: &VarianceParams, phi: f64) -> f64 {
        let seg = &self.data[c].segment;
        if self.annual {
            annual_phase2_loglik_unchecked(seg, p, v, &AnnualParams { phi })
        } else {
            phase2_loglik_unchecked(seg, p, v)
        }
    }

    fn all_ll(&self, v: &VarianceParams, phi: f64) -> Vec<f64> {
        (0..self.data.len())
            .map(|c| self.country_ll(c, &self.params[c], v, phi))
            .collect()
    }

    fn log_posterior(&self) -> f64 {
        self.ll.iter().sum::<f64>() + self.state.log_prior()
    }

    /// Redraws one coordinate of country `c` from its pool-level normal.
    /// The proposal is the conditional prior, so only the likelihood enters
    /// the acceptance ratio. These moves let a chain cross between separated
    /// modes that the random walk rarely bridges.
    fn prior_jump(&mut self, c: usize, k: usize, rng: &mut StreamRng) {
        let z: f64 = StandardNormal.sample(rng);
        let mut proposal = self.state.raw[c];
        proposal[k] = self.state.means[k] + self.state.sds[k] * z;
        let p_new = self.state.transforms[c].params(&proposal);
        if p_new.validate().is_err() {
            return;
        }
        let ll_new = self.country_ll(c, &p_new, &self.variance, self.phi);
        if accept(rng, ll_new - self.ll[c]) {
            self.state.raw[c] = proposal;
            self.params[c] = p_new;
            self.ll[c] = ll_new;
        }
    }

    fn update_country(&mut self, c: usize, rng: &mut StreamRng) {
        let current = self.state.raw[c];
        let mut proposal = [0.0; 4];
        self.country_props[c].propose(&current, rng, &mut proposal);
        let p_new = self.state.transforms[c].params(&proposal);
        let accepted = if p_new.validate().is_ok() {
            let ll_new = self.country_ll(c, &p_new, &self.variance, self.phi);
            let prior_diff: f64 = (0..4)
                .map(|k| {
                    normal_logpdf(proposal[k], self.state.means[k], self.state.sds[k])
                        - normal_logpdf(current[k], self.state.means[k], self.state.sds[k])
                })
                .sum();
            if accept(rng, ll_new - self.ll[c] + prior_diff) {
                self.state.raw[c] = proposal;
                self.params[c] = p_new;
                self.ll[c] = ll_new;
                true
            } else {
                false
            }
        } else {
            false
        };
        self.country_props[c].record(accepted, &self.state.raw[c]);
    }

    /// Draws the pool mean and sd of coordinate `k` from their full
    /// conditionals. The mean given the sd is a truncated normal; the
    /// precision given the mean is a gamma truncated to `sd <= HYPER_SD_MAX`.
    fn gibbs_hyper(&mut self, k: usize, rng: &mut StreamRng) {
        let n = self.state.raw.len() as f64;
        let sum: f64 = self.state.raw.iter().map(|r| r[k]).sum();
        let sd = self.state.sds[k];
        self.state.means[k] = tnorm::sample(
            rng,
            sum / n,
            sd / n.sqrt(),
            -HYPER_MEAN_BOUND,
            HYPER_MEAN_BOUND,
        );
        let m = self.state.means[k];
        let ss: f64 = self.state.raw.iter().map(|r| (r[k] - m).powi(2)).sum();
        let tau = truncated_gamma(rng, 0.5 * (n - 1.0), 0.5 * ss, HYPER_SD_MAX.powi(-2));
        self.state.sds[k] = tau.sqrt().recip();
    }

    /// Moves `(mean_k, sd_k)` with every country's standardized coordinate
    /// held fixed, so the country values shift and scale along with them.
    fn noncentered_hyper(&mut self, k: usize, rng: &mut StreamRng) {
        let current = [self.state.means[k], self.state.sds[k]];
        let mut proposal = [0.0; 2];
        self.hyper_props[k].propose(&current, rng, &mut proposal);
        let [m, s] = proposal;
        let in_support = m.abs() <= HYPER_MEAN_BOUND && s > 0.0 && s <= HYPER_SD_MAX;
        let mut accepted = false;
        if in_support {
            let moved: Vec<[f64; 4]> = self
                .state
                .raw
                .iter()
                .map(|r| {
                    let mut r = *r;
                    r[k] = m + s * (r[k] - current[0]) / current[1];
                    r
                })
                .collect();
            let params: Vec<Phase2Params> = moved
                .iter()
                .zip(&self.state.transforms)
                .map(|(r, t)| t.params(r))
                .collect();
            if params.iter().all(|p| p.validate().is_ok()) {
                let ll: Vec<f64> = (0..params.len())
                    .map(|c| self.country_ll(c, &params[c], &self.variance, self.phi))
                    .collect();
                let diff = ll.iter().sum::<f64>() - self.ll.iter().sum::<f64>();
                if accept(rng, diff) {
                    self.state.raw = moved;
                    self.state.means[k] = m;
                    self.state.sds[k] = s;
                    self.params = params;
                    self.ll = ll;
                    accepted = true;
                }
            }
        }
        let now = [self.state.means[k], self.state.sds[k]];
        self.hyper_props[k].record(accepted, &now);
    }

    fn update_hyper(&mut self, k: usize, rng: &mut StreamRng) {
        if self.state.raw.len() >= 2 {
            self.gibbs_hyper(k, rng);
        }
        self.noncentered_hyper(k, rng);
    }

    fn update_variance(&mut self, rng: &mut StreamRng) {
        let current = variance_vec(&self.variance);
        let mut proposal = [0.0; 5];
        self.variance_prop.propose(&current, rng, &mut proposal);
        let accepted = self.prior.contains(&proposal) && {
            let v_new = variance_from(&proposal, self.variance.sd_floor);
            let ll_new = self.all_ll(&v_new, self.phi);
            let diff = ll_new.iter().sum::<f64>() - self.ll.iter().sum::<f64>();
            if accept(rng, diff) {
                self.variance = v_new;
                self.ll = ll_new;
                true
            } else {
                false
            }
        };
        self.variance_prop
            .record(accepted, &variance_vec(&self.variance));
    }

    fn update_phi(&mut self, rng: &mut StreamRng) {
        let mut proposal = [0.0];
        self.phi_prop.propose(&[self.phi], rng, &mut proposal);
        let phi_new = proposal[0];
        let accepted = (0.0..1.0).contains(&phi_new) && {
            let ll_new = self.all_ll(&self.variance, phi_new);
            let diff = ll_new.iter().sum::<f64>() - self.ll.iter().sum::<f64>();
            if accept(rng, diff) {
                self.phi = phi_new;
                self.ll = ll_new;
                true
            } else {
                false
            }
        };
        self.phi_prop.record(accepted, &[self.phi]);
    }

    fn proposals_mut(&mut self) -> impl Iterator<Item = &mut AdaptiveProposal> {
        self.country_props
            .iter_mut()
            .chain(self.hyper_props.iter_mut())
            .chain(std::iter::once(&mut self.variance_prop))
            .chain(std::iter::once(&mut self.phi_prop))
    }
}

impl GibbsSampler for Phase2Sampler<'_> {
    fn sweep(&mut self, rng: &mut StreamRng) {
        for c in 0..self.data.len() {
            self.update_country(c, rng);
            for k in 0..4 {
                self.prior_jump(c, k, rng);
            }
        }
        for k in 0..4 {
            self.update_hyper(k, rng);
        }
        if self.estimate_variance {
            self.update_variance(rng);
        }
        if self.annual {
            self.update_phi(rng);
        }
    }

    fn snapshot(&self) -> Vec<f64> {
        let mut row = Vec::with_capacity(16 + 5 * self.params.len());
        row.push(self.log_posterior());
        row.extend_from_slice(&variance_vec(&self.variance));
        if self.annual {
            row.push(self.phi);
        }
        for k in 0..4 {
            row.push(self.state.means[k]);
            row.push(self.state.sds[k]);
        }
        for p in &self.params {
            row.extend_from_slice(&[p.d, p.delta1, p.delta2, p.delta3, p.delta4]);
        }
        row
    }

    fn end_window(&mut self) {
        self.proposals_mut().for_each(AdaptiveProposal::end_window);
    }

    fn reset_moments(&mut self) {
        self.proposals_mut().for_each(AdaptiveProposal::reset_moments);
    }

    fn freeze(&mut self) {
        self.proposals_mut().for_each(AdaptiveProposal::freeze);
    }

    fn acceptance_rates(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .state
            .countries
            .iter()
            .zip(&self.country_props)
            .map(|(id, p)| (format!("phase2/country/{id}"), p.acceptance_rate()))
            .collect();
        for (k, p) in COORDINATES.iter().zip(&self.hyper_props) {
            out.push((format!("phase2/hyper/{k}"), p.acceptance_rate()));
        }
        if self.estimate_variance {
            out.push(("phase2/variance".into(), self.variance_prop.acceptance_rate()));
        }
        if self.annual {
            out.push(("phase2/phi".into(), self.phi_prop.acceptance_rate()));
        }
        out
    }
}

/// Coordinate names of a Phase II chain set, in column order.
pub fn coordinate_names(countries: &[String], annual: bool) -> Vec<String> {
    let mut names = vec![LOG_POSTERIOR.to_owned()];
    names.extend(VARIANCE_NAMES.iter().map(|s| s.to_string()));
    if annual {
        names.push("phi".into());
    }
    for k in COORDINATES {
        names.push(format!("mean_{k}"));
        names.push(format!("sd_{k}"));
    }
    for id in countries {
        for p in ["d", "delta1", "delta2", "delta3", "delta4"] {
            names.push(format!("{p}[{id}]"));
        }
    }
    names
}

/// Pulls the Phase II segments of the pooled countries.
fn pooled_segments(
    store: &DataStore,
    phases: &BTreeMap<String, PhaseSegmentation>,
    config: &McmcConfig,
) -> Result<(Vec<String>, Vec<CountryData>, Vec<Phase2Transform>)> {
    if config.pool.is_empty() {
        return Err(Error::EmptyPool("Phase II pool".into()));
    }
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut transforms = Vec::new();
    for id in &config.pool.ids {
        let series = store
            .get(id)
            .ok_or_else(|| Error::UnknownCountry(id.clone()))?;
        let seg = phases
            .get(id)
            .ok_or_else(|| Error::MissingParameters(format!("phase segmentation of {id}")))?;
        let obs = series.observations();
        let range = seg.phase2_range(obs.len());
        if range.len() < 2 {
            return Err(Error::NoPhase2Transitions(id.clone()));
        }
        let segment: Vec<(i32, f64)> = obs[range]
            .iter()
            .map(|o| (o.period_start, o.tfr))
            .collect();
        transforms.push(Phase2Transform::new(config.mode, obs[seg.phase2_start].tfr)?);
        ids.push(id.clone());
        data.push(CountryData { segment });
    }
    Ok((ids, data, transforms))
}

/// Samples the Phase II posterior for every pooled country.
pub fn run_phase2_mcmc(
    store: &DataStore,
    phases: &BTreeMap<String, PhaseSegmentation>,
    config: &McmcConfig,
) -> Result<ChainSet> {
    config.settings.validate()?;
    if store.mode() != config.mode {
        return Err(Error::InvalidConfig(format!(
            "store is {} but the sampler is configured for {}",
            store.mode(),
            config.mode
        )));
    }
    let (countries, data, transforms) = pooled_segments(store, phases, config)?;
    let annual = config.mode == Mode::Annual;
    let prior = VariancePrior::for_mode(config.mode);
    let (variance, estimate_variance) = match &config.settings.variance {
        VarianceSetting::Estimate => (VarianceParams::default(), true),
        VarianceSetting::Fixed(v) => (*v, false),
    };
    if estimate_variance && !prior.contains(&variance_vec(&variance)) {
        return Err(Error::InvalidConfig(
            "default variance parameters fall outside the prior".into(),
        ));
    }

    let build = |_chain: usize| -> Result<Phase2Sampler<'_>> {
        let n = data.len();
        let state = Phase2Hierarchy {
            countries: countries.clone(),
            transforms: transforms.clone(),
            raw: vec![[0.0; 4]; n],
            means: [0.0; 4],
            sds: [1.0; 4],
        };
        let params: Vec<Phase2Params> = (0..n).map(|c| state.country_params(c)).collect();
        let mut sampler = Phase2Sampler {
            data: &data,
            annual,
            state,
            params,
            ll: Vec::new(),
            variance,
            estimate_variance,
            prior,
            phi: 0.5,
            country_props: (0..n)
                .map(|_| AdaptiveProposal::new(&[0.3, 0.3, 0.3, 0.3]))
                .collect(),
            hyper_props: (0..4)
                .map(|_| AdaptiveProposal::new(&[0.3, 0.1]))
                .collect(),
            variance_prop: AdaptiveProposal::new(&[0.01, 0.3, 0.005, 0.005, 0.1]),
            phi_prop: AdaptiveProposal::new(&[0.05]),
        };
        sampler.ll = sampler.all_ll(&sampler.variance, sampler.phi);
        if let Some(c) = sampler.ll.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogPosterior(format!(
                "Phase II likelihood of {}",
                countries[c]
            )));
        }
        Ok(sampler)
    };

    let (chains, acceptance_rates) = run_chains(&config.settings, "phase2", build)?;
    Ok(ChainSet {
        kind: ChainKind::Phase2,
        mode: config.mode,
        names: coordinate_names(&countries, annual),
        chains,
        countries,
        settings: config.settings.clone(),
        acceptance_rates,
    })
}

/// Column lookup for reading parameters back out of a Phase II chain set.
#[derive(Clone, Debug)]
pub struct Phase2Layout {
    variance: [usize; 5],
    phi: Option<usize>,
    countries: BTreeMap<String, [usize; 5]>,
    sd_floor: f64,
}

impl Phase2Layout {
    pub fn new(set: &ChainSet) -> Result<Self> {
        let col = |name: &str| {
            set.column(name).ok_or_else(|| Error::ChainFile {
                path: "phase2".into(),
                message: format!("missing column {name}"),
            })
        };
        let mut variance = [0; 5];
        for (slot, name) in variance.iter_mut().zip(VARIANCE_NAMES) {
            *slot = col(name)?;
        }
        let mut countries = BTreeMap::new();
        for id in &set.countries {
            let mut cols = [0; 5];
            for (slot, p) in cols
                .iter_mut()
                .zip(["d", "delta1", "delta2", "delta3", "delta4"])
            {
                *slot = col(&format!("{p}[{id}]"))?;
            }
            countries.insert(id.clone(), cols);
        }
        let sd_floor = match &set.settings.variance {
            VarianceSetting::Fixed(v) => v.sd_floor,
            VarianceSetting::Estimate => VarianceParams::default().sd_floor,
        };
        Ok(Phase2Layout {
            variance,
            phi: set.column("phi"),
            countries,
            sd_floor,
        })
    }

    pub fn has_country(&self, id: &str) -> bool {
        self.countries.contains_key(id)
    }

    pub fn params(&self, draw: &[f64], id: &str) -> Option<Phase2Params> {
        self.countries.get(id).map(|c| Phase2Params {
            d: draw[c[0]],
            delta1: draw[c[1]],
            delta2: draw[c[2]],
            delta3: draw[c[3]],
            delta4: draw[c[4]],
        })
    }

    pub fn variance(&self, draw: &[f64]) -> VarianceParams {
        let v = self.variance.map(|i| draw[i]);
        variance_from(&v, self.sd_floor)
    }

    pub fn annual(&self, draw: &[f64]) -> Option<AnnualParams> {
        self.phi.map(|i| AnnualParams { phi: draw[i] })
    }
}
