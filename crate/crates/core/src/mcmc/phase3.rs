//! Phase III hierarchy: country AR(1) asymptotes and coefficients drawn from
//! truncated normals around pool-level means, with uniform hyperpriors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{DataStore, PhaseSegmentation};
use crate::error::{Error, Result};
use crate::kernel::{phase3_loglik_unchecked, Phase3Params};
use crate::rng::StreamRng;

use super::adapt::AdaptiveProposal;
use super::chain::{ChainKind, ChainSet, LOG_POSTERIOR};
use super::{accept, run_chains, tnorm, GibbsSampler, McmcConfig};

pub const MU_BAR_MAX: f64 = 2.1;
pub const SIGMA_MU_MAX: f64 = 0.5;
pub const RHO_BAR_MAX: f64 = 1.0;
pub const SIGMA_RHO_MAX: f64 = 0.289;
pub const SIGMA_EPS_MAX: f64 = 0.5;

/// Upper end (exclusive) of the country AR coefficient support.
pub const RHO_CAP: f64 = 1.0;

pub const HYPER_NAMES: [&str; 5] = ["mu_bar", "sigma_mu", "rho_bar", "sigma_rho", "sigma_eps"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase3Hyper {
    pub mu_bar: f64,
    pub sigma_mu: f64,
    pub rho_bar: f64,
    pub sigma_rho: f64,
    pub sigma_eps: f64,
}

impl Phase3Hyper {
    /// Whether the draw lies in the uniform hyperprior boxes.
    pub fn in_support(&self) -> bool {
        (0.0..=MU_BAR_MAX).contains(&self.mu_bar)
            && (0.0..=SIGMA_MU_MAX).contains(&self.sigma_mu)
            && (0.0..=RHO_BAR_MAX).contains(&self.rho_bar)
            && (0.0..=SIGMA_RHO_MAX).contains(&self.sigma_rho)
            && (0.0..=SIGMA_EPS_MAX).contains(&self.sigma_eps)
    }

    fn log_mu_prior(&self, mu: f64) -> f64 {
        tnorm::log_density(mu, self.mu_bar, self.sigma_mu, 0.0, f64::INFINITY)
    }

    fn log_rho_prior(&self, rho: f64) -> f64 {
        tnorm::log_density(rho, self.rho_bar, self.sigma_rho, 0.0, RHO_CAP)
    }
}

/// Country `(μ, ρ)` for a country without Phase III data, drawn from the
/// country layer at the given hyperparameters.
pub fn predictive_country_draw(hyper: &Phase3Hyper, rng: &mut StreamRng) -> Phase3Params {
    let mu = tnorm::sample(rng, hyper.mu_bar, hyper.sigma_mu, 0.0, f64::INFINITY);
    let rho = tnorm::sample(rng, hyper.rho_bar, hyper.sigma_rho, 0.0, RHO_CAP);
    Phase3Params {
        mu,
        rho,
        sigma_eps: hyper.sigma_eps,
    }
}

struct Phase3Sampler<'a> {
    countries: &'a [String],
    segments: &'a [Vec<(i32, f64)>],
    hyper: Phase3Hyper,
    country: Vec<(f64, f64)>,
    ll: Vec<f64>,
    country_props: Vec<AdaptiveProposal>,
    mu_prop: AdaptiveProposal,
    rho_prop: AdaptiveProposal,
    mu_shift_prop: AdaptiveProposal,
    rho_shift_prop: AdaptiveProposal,
    eps_prop: AdaptiveProposal,
}

impl Phase3Sampler<'_> {
    fn country_ll(&self, c: usize, mu: f64, rho: f64, sigma_eps: f64) -> f64 {
        phase3_loglik_unchecked(
            &self.segments[c],
            &Phase3Params {
                mu,
                rho,
                sigma_eps,
            },
        )
    }

    fn log_posterior(&self) -> f64 {
        self.ll.iter().sum::<f64>()
            + self
                .country
                .iter()
                .map(|&(mu, rho)| self.hyper.log_mu_prior(mu) + self.hyper.log_rho_prior(rho))
                .sum::<f64>()
    }

    fn update_country(&mut self, c: usize, rng: &mut StreamRng) {
        let (mu, rho) = self.country[c];
        let mut prop = [0.0; 2];
        self.country_props[c].propose(&[mu, rho], rng, &mut prop);
        let [mu_new, rho_new] = prop;
        let in_support = mu_new >= 0.0 && (0.0..RHO_CAP).contains(&rho_new);
        let accepted = in_support && {
            let ll_new = self.country_ll(c, mu_new, rho_new, self.hyper.sigma_eps);
            let prior_diff = self.hyper.log_mu_prior(mu_new) + self.hyper.log_rho_prior(rho_new)
                - self.hyper.log_mu_prior(mu)
                - self.hyper.log_rho_prior(rho);
            if accept(rng, ll_new - self.ll[c] + prior_diff) {
                self.country[c] = (mu_new, rho_new);
                self.ll[c] = ll_new;
                true
            } else {
                false
            }
        };
        let (m, r) = self.country[c];
        self.country_props[c].record(accepted, &[m, r]);
    }

    fn update_mu_hyper(&mut self, rng: &mut StreamRng) {
        let current = [self.hyper.mu_bar, self.hyper.sigma_mu];
        let mut prop = [0.0; 2];
        self.mu_prop.propose(&current, rng, &mut prop);
        let candidate = Phase3Hyper {
            mu_bar: prop[0],
            sigma_mu: prop[1],
            ..self.hyper
        };
        let accepted = candidate.sigma_mu > 0.0 && candidate.in_support() && {
            let diff: f64 = self
                .country
                .iter()
                .map(|&(mu, _)| candidate.log_mu_prior(mu) - self.hyper.log_mu_prior(mu))
                .sum();
            accept(rng, diff)
        };
        if accepted {
            self.hyper = candidate;
        }
        self.mu_prop
            .record(accepted, &[self.hyper.mu_bar, self.hyper.sigma_mu]);
    }

    fn update_rho_hyper(&mut self, rng: &mut StreamRng) {
        let current = [self.hyper.rho_bar, self.hyper.sigma_rho];
        let mut prop = [0.0; 2];
        self.rho_prop.propose(&current, rng, &mut prop);
        let candidate = Phase3Hyper {
            rho_bar: prop[0],
            sigma_rho: prop[1],
            ..self.hyper
        };
        let accepted = candidate.sigma_rho > 0.0 && candidate.in_support() && {
            let diff: f64 = self
                .country
                .iter()
                .map(|&(_, rho)| candidate.log_rho_prior(rho) - self.hyper.log_rho_prior(rho))
                .sum();
            accept(rng, diff)
        };
        if accepted {
            self.hyper = candidate;
        }
        self.rho_prop
            .record(accepted, &[self.hyper.rho_bar, self.hyper.sigma_rho]);
    }

    /// Proposes new `(mu_bar, sigma_mu)` and moves every `μ_c` by the affine
    /// map that keeps its standardized position, `μ' = m' + (s'/s)(μ - m)`.
    fn shift_mu(&mut self, rng: &mut StreamRng) {
        let (m, s) = (self.hyper.mu_bar, self.hyper.sigma_mu);
        let mut prop = [0.0; 2];
        self.mu_shift_prop.propose(&[m, s], rng, &mut prop);
        let candidate = Phase3Hyper {
            mu_bar: prop[0],
            sigma_mu: prop[1],
            ..self.hyper
        };
        let mut accepted = false;
        if candidate.sigma_mu > 0.0 && candidate.in_support() {
            let scale = candidate.sigma_mu / s;
            let moved: Vec<f64> = self
                .country
                .iter()
                .map(|&(mu, _)| candidate.mu_bar + scale * (mu - m))
                .collect();
            if moved.iter().all(|&mu| mu >= 0.0) {
                let ll: Vec<f64> = (0..moved.len())
                    .map(|c| self.country_ll(c, moved[c], self.country[c].1, self.hyper.sigma_eps))
                    .collect();
                let prior: f64 = moved
                    .iter()
                    .zip(&self.country)
                    .map(|(&new, &(old, _))| candidate.log_mu_prior(new) - self.hyper.log_mu_prior(old))
                    .sum();
                let log_ratio = ll.iter().sum::<f64>() - self.ll.iter().sum::<f64>()
                    + prior
                    + moved.len() as f64 * scale.ln();
                if accept(rng, log_ratio) {
                    for (c, mu) in moved.into_iter().enumerate() {
                        self.country[c].0 = mu;
                    }
                    self.ll = ll;
                    self.hyper = candidate;
                    accepted = true;
                }
            }
        }
        self.mu_shift_prop
            .record(accepted, &[self.hyper.mu_bar, self.hyper.sigma_mu]);
    }

    /// The `ρ` counterpart of [`shift_mu`](Self::shift_mu).
    fn shift_rho(&mut self, rng: &mut StreamRng) {
        let (m, s) = (self.hyper.rho_bar, self.hyper.sigma_rho);
        let mut prop = [0.0; 2];
        self.rho_shift_prop.propose(&[m, s], rng, &mut prop);
        let candidate = Phase3Hyper {
            rho_bar: prop[0],
            sigma_rho: prop[1],
            ..self.hyper
        };
        let mut accepted = false;
        if candidate.sigma_rho > 0.0 && candidate.in_support() {
            let scale = candidate.sigma_rho / s;
            let moved: Vec<f64> = self
                .country
                .iter()
                .map(|&(_, rho)| candidate.rho_bar + scale * (rho - m))
                .collect();
            if moved.iter().all(|rho| (0.0..RHO_CAP).contains(rho)) {
                let ll: Vec<f64> = (0..moved.len())
                    .map(|c| self.country_ll(c, self.country[c].0, moved[c], self.hyper.sigma_eps))
                    .collect();
                let prior: f64 = moved
                    .iter()
                    .zip(&self.country)
                    .map(|(&new, &(_, old))| candidate.log_rho_prior(new) - self.hyper.log_rho_prior(old))
                    .sum();
                let log_ratio = ll.iter().sum::<f64>() - self.ll.iter().sum::<f64>()
                    + prior
                    + moved.len() as f64 * scale.ln();
                if accept(rng, log_ratio) {
                    for (c, rho) in moved.into_iter().enumerate() {
                        self.country[c].1 = rho;
                    }
                    self.ll = ll;
                    self.hyper = candidate;
                    accepted = true;
                }
            }
        }
        self.rho_shift_prop
            .record(accepted, &[self.hyper.rho_bar, self.hyper.sigma_rho]);
    }

    fn update_sigma_eps(&mut self, rng: &mut StreamRng) {
        let mut prop = [0.0];
        self.eps_prop
            .propose(&[self.hyper.sigma_eps], rng, &mut prop);
        let s = prop[0];
        let accepted = s > 0.0 && s <= SIGMA_EPS_MAX && {
            let ll_new: Vec<f64> = (0..self.segments.len())
                .map(|c| {
                    let (mu, rho) = self.country[c];
                    self.country_ll(c, mu, rho, s)
                })
                .collect();
            if accept(rng, ll_new.iter().sum::<f64>() - self.ll.iter().sum::<f64>()) {
                self.ll = ll_new;
                self.hyper.sigma_eps = s;
                true
            } else {
                false
            }
        };
        self.eps_prop.record(accepted, &[self.hyper.sigma_eps]);
    }

    fn proposals_mut(&mut self) -> impl Iterator<Item = &mut AdaptiveProposal> {
        self.country_props
            .iter_mut()
            .chain([
                &mut self.mu_prop,
                &mut self.rho_prop,
                &mut self.mu_shift_prop,
                &mut self.rho_shift_prop,
                &mut self.eps_prop,
            ])
    }
}

impl GibbsSampler for Phase3Sampler<'_> {
    fn sweep(&mut self, rng: &mut StreamRng) {
        for c in 0..self.segments.len() {
            self.update_country(c, rng);
        }
        self.update_mu_hyper(rng);
        self.shift_mu(rng);
        self.update_rho_hyper(rng);
        self.shift_rho(rng);
        self.update_sigma_eps(rng);
    }

    fn snapshot(&self) -> Vec<f64> {
        let h = &self.hyper;
        let mut row = vec![
            self.log_posterior(),
            h.mu_bar,
            h.sigma_mu,
            h.rho_bar,
            h.sigma_rho,
            h.sigma_eps,
        ];
        for &(mu, rho) in &self.country {
            row.push(mu);
            row.push(rho);
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
            .countries
            .iter()
            .zip(&self.country_props)
            .map(|(id, p)| (format!("phase3/country/{id}"), p.acceptance_rate()))
            .collect();
        out.push(("phase3/hyper/mu".into(), self.mu_prop.acceptance_rate()));
        out.push(("phase3/hyper/rho".into(), self.rho_prop.acceptance_rate()));
        out.push(("phase3/shift/mu".into(), self.mu_shift_prop.acceptance_rate()));
        out.push(("phase3/shift/rho".into(), self.rho_shift_prop.acceptance_rate()));
        out.push(("phase3/sigma_eps".into(), self.eps_prop.acceptance_rate()));
        out
    }
}

pub fn coordinate_names(countries: &[String]) -> Vec<String> {
    let mut names = vec![LOG_POSTERIOR.to_owned()];
    names.extend(HYPER_NAMES.iter().map(|s| s.to_string()));
    for id in countries {
        names.push(format!("mu[{id}]"));
        names.push(format!("rho[{id}]"));
    }
    names
}

/// Minimum Phase III segment length for a country to enter the hierarchy.
pub const MIN_PHASE3_LEN: usize = 3;

/// Samples the Phase III posterior over the pooled countries that have
/// reached Phase III. Pool members without a long enough Phase III segment
/// are skipped.
pub fn run_phase3_mcmc(
    store: &DataStore,
    phases: &BTreeMap<String, PhaseSegmentation>,
    config: &McmcConfig,
) -> Result<ChainSet> {
    config.settings.validate()?;
    let mut countries = Vec::new();
    let mut segments = Vec::new();
    for id in &config.pool.ids {
        let series = store
            .get(id)
            .ok_or_else(|| Error::UnknownCountry(id.clone()))?;
        let Some(seg) = phases.get(id) else { continue };
        let obs = series.observations();
        let Some(range) = seg.phase3_range(obs.len()) else {
            continue;
        };
        if range.len() < MIN_PHASE3_LEN {
            continue;
        }
        countries.push(id.clone());
        segments.push(
            obs[range]
                .iter()
                .map(|o| (o.period_start, o.tfr))
                .collect::<Vec<_>>(),
        );
    }
    if countries.len() < 2 {
        return Err(Error::Phase3Unidentifiable(countries.len()));
    }

    let build = |_chain: usize| -> Result<Phase3Sampler<'_>> {
        let country: Vec<(f64, f64)> = segments
            .iter()
            .map(|s| (s.last().expect("non-empty").1, 0.8))
            .collect();
        let mean_mu = country.iter().map(|c| c.0).sum::<f64>() / country.len() as f64;
        let hyper = Phase3Hyper {
            mu_bar: mean_mu.clamp(0.0, MU_BAR_MAX),
            sigma_mu: 0.25,
            rho_bar: 0.8,
            sigma_rho: 0.1,
            sigma_eps: 0.1,
        };
        let mut sampler = Phase3Sampler {
            countries: &countries,
            segments: &segments,
            hyper,
            country,
            ll: Vec::new(),
            country_props: (0..segments.len())
                .map(|_| AdaptiveProposal::new(&[0.1, 0.05]))
                .collect(),
            mu_prop: AdaptiveProposal::new(&[0.1, 0.05]),
            rho_prop: AdaptiveProposal::new(&[0.05, 0.03]),
            mu_shift_prop: AdaptiveProposal::new(&[0.05, 0.03]),
            rho_shift_prop: AdaptiveProposal::new(&[0.03, 0.02]),
            eps_prop: AdaptiveProposal::new(&[0.01]),
        };
        sampler.ll = (0..segments.len())
            .map(|c| {
                let (mu, rho) = sampler.country[c];
                sampler.country_ll(c, mu, rho, hyper.sigma_eps)
            })
            .collect();
        if !sampler.log_posterior().is_finite() {
            return Err(Error::NonFiniteLogPosterior("Phase III".into()));
        }
        Ok(sampler)
    };

    let (chains, acceptance_rates) = run_chains(&config.settings, "phase3", build)?;
    Ok(ChainSet {
        kind: ChainKind::Phase3,
        mode: config.mode,
        names: coordinate_names(&countries),
        chains,
        countries,
        settings: config.settings.clone(),
        acceptance_rates,
    })
}

/// Column lookup for reading parameters back out of a Phase III chain set.
#[derive(Clone, Debug)]
pub struct Phase3Layout {
    hyper: [usize; 5],
    countries: BTreeMap<String, [usize; 2]>,
}

impl Phase3Layout {
    pub fn new(set: &ChainSet) -> Result<Self> {
        let col = |name: &str| {
            set.column(name).ok_or_else(|| Error::ChainFile {
                path: "phase3".into(),
                message: format!("missing column {name}"),
            })
        };
        let mut hyper = [0; 5];
        for (slot, name) in hyper.iter_mut().zip(HYPER_NAMES) {
            *slot = col(name)?;
        }
        let mut countries = BTreeMap::new();
        for id in &set.countries {
            countries.insert(
                id.clone(),
                [col(&format!("mu[{id}]"))?, col(&format!("rho[{id}]"))?],
            );
        }
        Ok(Phase3Layout { hyper, countries })
    }

    pub fn has_country(&self, id: &str) -> bool {
        self.countries.contains_key(id)
    }

    pub fn hyper(&self, draw: &[f64]) -> Phase3Hyper {
        let [a, b, c, d, e] = self.hyper.map(|i| draw[i]);
        Phase3Hyper {
            mu_bar: a,
            sigma_mu: b,
            rho_bar: c,
            sigma_rho: d,
            sigma_eps: e,
        }
    }

    pub fn params(&self, draw: &[f64], id: &str) -> Option<Phase3Params> {
        self.countries.get(id).map(|[m, r]| Phase3Params {
            mu: draw[*m],
            rho: draw[*r],
            sigma_eps: draw[self.hyper[4]],
        })
    }
}
