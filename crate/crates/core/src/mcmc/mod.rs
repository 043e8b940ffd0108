//! Hierarchical estimation of the Phase II and Phase III parameters by
//! random-walk Metropolis within Gibbs.

mod adapt;
pub mod chain;
pub mod diagnostics;
pub mod phase2;
pub mod phase3;
pub mod tnorm;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CountrySet, Mode};
use crate::error::{Error, Result};
use crate::kernel::VarianceParams;
use crate::rng::{stream, StreamRng};

pub use chain::{ChainKind, ChainManifest, ChainSet};
pub use diagnostics::{gelman_rubin, potential_scale_reduction, Rhat};
pub use phase2::{run_phase2_mcmc, Phase2Hierarchy};
pub use phase3::{predictive_country_draw, run_phase3_mcmc, Phase3Hyper};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VarianceSetting {
    /// Sample the error-scale parameters jointly with everything else.
    Estimate,
    /// Hold them at the given values.
    Fixed(VarianceParams),
}

/// Sampler settings independent of the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcSettings {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
    /// Iterations between proposal-scale updates during burn-in.
    pub adapt_window: usize,
    pub variance: VarianceSetting,
}

impl Default for McmcSettings {
    fn default() -> Self {
        McmcSettings {
            iterations: 20_000,
            burn_in: 10_000,
            thin: 10,
            chains: 3,
            seed: 2023,
            adapt_window: 100,
            variance: VarianceSetting::Estimate,
        }
    }
}

impl McmcSettings {
    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(Error::InvalidConfig(format!(
                "iterations ({}) must exceed burn-in ({})",
                self.iterations, self.burn_in
            )));
        }
        if self.chains < 2 {
            return Err(Error::InvalidConfig("at least 2 chains are required".into()));
        }
        if self.thin == 0 || self.adapt_window == 0 {
            return Err(Error::InvalidConfig(
                "thin and adapt_window must be positive".into(),
            ));
        }
        if (self.iterations - self.burn_in) / self.thin == 0 {
            return Err(Error::InvalidConfig("no draws would be recorded".into()));
        }
        if let VarianceSetting::Fixed(v) = &self.variance {
            v.validate()?;
        }
        Ok(())
    }

    pub fn recorded_per_chain(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McmcConfig {
    pub settings: McmcSettings,
    pub pool: CountrySet,
    pub mode: Mode,
}

/// One Gibbs sweep over all blocks plus the bookkeeping the driver needs.
pub(crate) trait GibbsSampler {
    fn sweep(&mut self, rng: &mut StreamRng);
    fn snapshot(&self) -> Vec<f64>;
    fn end_window(&mut self);
    fn reset_moments(&mut self);
    fn freeze(&mut self);
    fn acceptance_rates(&self) -> Vec<(String, f64)>;
}

pub(crate) struct ChainOutput {
    pub draws: Vec<Vec<f64>>,
    pub rates: Vec<(String, f64)>,
}

pub(crate) fn run_chain<S: GibbsSampler>(
    mut sampler: S,
    settings: &McmcSettings,
    rng: &mut StreamRng,
) -> ChainOutput {
    let burn_in = settings.burn_in;
    let mut draws = Vec::with_capacity(settings.recorded_per_chain());
    if burn_in == 0 {
        sampler.freeze();
    }
    for it in 0..settings.iterations {
        sampler.sweep(rng);
        let done = it + 1;
        if done <= burn_in {
            if done % settings.adapt_window == 0 {
                sampler.end_window();
            }
            if done == burn_in / 4 {
                sampler.reset_moments();
            }
            if done == burn_in {
                sampler.freeze();
            }
        } else if (done - burn_in).is_multiple_of(settings.thin) {
            draws.push(sampler.snapshot());
        }
    }
    ChainOutput {
        draws,
        rates: sampler.acceptance_rates(),
    }
}

/// Runs `settings.chains` chains in parallel, each on its own labelled
/// stream, and merges per-block acceptance rates by averaging.
pub(crate) fn run_chains<S, F>(
    settings: &McmcSettings,
    label: &str,
    build: F,
) -> Result<(Vec<Vec<Vec<f64>>>, std::collections::BTreeMap<String, f64>)>
where
    S: GibbsSampler,
    F: Fn(usize) -> Result<S> + Sync,
{
    let outputs: Vec<ChainOutput> = (0..settings.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(settings.seed, &format!("{label}/chain/{c}"));
            let sampler = build(c)?;
            Ok(run_chain(sampler, settings, &mut rng))
        })
        .collect::<Result<_>>()?;
    let mut rates = std::collections::BTreeMap::new();
    for out in &outputs {
        for (k, v) in &out.rates {
            *rates.entry(k.clone()).or_insert(0.0) += v / settings.chains as f64;
        }
    }
    Ok((outputs.into_iter().map(|o| o.draws).collect(), rates))
}

#[inline]
pub(crate) fn accept(rng: &mut StreamRng, log_ratio: f64) -> bool {
    use rand::Rng;
    if log_ratio >= 0.0 {
        return true;
    }
    if log_ratio.is_nan() {
        return false;
    }
    rng.random::<f64>().ln() < log_ratio
}
