//! Forward simulation of synthetic panels with known parameters, used as an
//! oracle for recovery and calibration checks.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DataStore, Mode, PhaseSegmentation, StoreMetadata, TfrSeries};
use crate::error::{Error, Result};
use crate::kernel::{
    annual_decrement_mean, double_logistic_decrement, error_sd, phase2_step_mean,
    phase3_step_mean, AnnualParams, Phase2Params, Phase3Params, VarianceParams,
};
use crate::mcmc::phase3::{predictive_country_draw, Phase3Hyper};
use crate::rng::{stream, StreamRng};

/// Smallest value a synthetic observation may take.
const MIN_LEVEL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Every period is Phase III, starting `start_offset` above the
    /// country's asymptote.
    Phase3Only { start_offset: f64 },
    /// A Phase II decline switching to Phase III once the level drops below
    /// `delta4`. It starts from `start_level`, or from the sum of the
    /// `phase2` widths when that is `None`.
    Transition {
        phase2: Phase2Params,
        start_level: Option<f64>,
        variance: VarianceParams,
        annual: Option<AnnualParams>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub mode: Mode,
    pub start_year: i32,
    pub hyper: Phase3Hyper,
    pub kind: SyntheticKind,
    /// Multiplies every shock; zero gives the noise-free recursion.
    pub noise_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountryTruth {
    pub country_id: String,
    pub phase2: Option<Phase2Params>,
    pub phase3: Phase3Params,
    pub segmentation: PhaseSegmentation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub truth: SyntheticTruth,
    pub seed: u64,
    pub countries: Vec<CountryTruth>,
}

impl SyntheticManifest {
    pub fn phases(&self) -> std::collections::BTreeMap<String, PhaseSegmentation> {
        self.countries
            .iter()
            .map(|c| (c.country_id.clone(), c.segmentation))
            .collect()
    }

    pub fn country(&self, id: &str) -> Option<&CountryTruth> {
        self.countries.iter().find(|c| c.country_id == id)
    }
}

pub fn synthetic_id(i: usize) -> String {
    format!("S{:03}", i + 1)
}

fn shock(rng: &mut StreamRng, sd: f64) -> f64 {
    if sd == 0.0 {
        0.0
    } else {
        let z: f64 = StandardNormal.sample(rng);
        sd * z
    }
}

fn simulate_country(
    truth: &SyntheticTruth,
    periods: usize,
    rng: &mut StreamRng,
) -> (Vec<f64>, Option<Phase2Params>, Phase3Params, PhaseSegmentation) {
    let q = predictive_country_draw(&truth.hyper, rng);
    let step_len = truth.mode.period_length();
    let mut values: Vec<f64> = Vec::with_capacity(periods);
    match &truth.kind {
        SyntheticKind::Phase3Only { start_offset } => {
            values.push((q.mu + start_offset).max(MIN_LEVEL));
            while values.len() < periods {
                let f = *values.last().expect("non-empty");
                let next = phase3_step_mean(f, &q) + shock(rng, truth.noise_scale * q.sigma_eps);
                values.push(next.max(MIN_LEVEL));
            }
            let seg = PhaseSegmentation {
                phase2_start: 0,
                phase3_start: Some(0),
                threshold: crate::data::DEFAULT_PHASE3_THRESHOLD,
            };
            (values, None, q, seg)
        }
        SyntheticKind::Transition {
            phase2,
            start_level,
            variance,
            annual,
        } => {
            values.push(start_level.unwrap_or_else(|| phase2.start_level()));
            let mut phase3_start = None;
            while values.len() < periods {
                let n = values.len();
                let f = values[n - 1];
                let t = truth.start_year + step_len * (n as i32 - 1);
                let next = if phase3_start.is_some() {
                    phase3_step_mean(f, &q) + shock(rng, truth.noise_scale * q.sigma_eps)
                } else {
                    let mean = match annual {
                        Some(a) if n >= 2 => {
                            let prev = values[n - 2];
                            f - annual_decrement_mean(prev, prev - f, phase2, a)
                        }
                        Some(_) => f - double_logistic_decrement(f, phase2),
                        None => phase2_step_mean(f, phase2),
                    };
                    mean + shock(rng, truth.noise_scale * error_sd(f, t, variance))
                };
                let next = next.max(MIN_LEVEL);
                if phase3_start.is_none() && next < phase2.delta4 {
                    phase3_start = Some(n);
                }
                values.push(next);
            }
            let seg = PhaseSegmentation {
                phase2_start: 0,
                phase3_start,
                threshold: crate::data::DEFAULT_PHASE3_THRESHOLD,
            };
            (values, Some(*phase2), q, seg)
        }
    }
}

/// Simulates `count` countries of `periods` observations each. Country `i`
/// draws from its own stream, so panels are stable under changes of `count`.
pub fn generate_synthetic(
    truth: &SyntheticTruth,
    count: usize,
    periods: usize,
    seed: u64,
) -> Result<(DataStore, SyntheticManifest)> {
    if !truth.hyper.in_support() {
        return Err(Error::InvalidParameter("hyperparameters outside their prior boxes".into()));
    }
    if let SyntheticKind::Transition {
        phase2,
        variance,
        annual,
        ..
    } = &truth.kind
    {
        phase2.validate()?;
        variance.validate()?;
        if let Some(a) = annual {
            a.validate()?;
        }
    }
    let step_len = truth.mode.period_length();
    let mut series = Vec::with_capacity(count);
    let mut countries = Vec::with_capacity(count);
    for i in 0..count {
        let id = synthetic_id(i);
        let mut rng = stream(seed, &format!("synthetic/{id}"));
        let (values, phase2, phase3, segmentation) = simulate_country(truth, periods, &mut rng);
        let points: Vec<(i32, f64)> = values
            .iter()
            .enumerate()
            .map(|(k, &v)| (truth.start_year + step_len * k as i32, v))
            .collect();
        series.push(TfrSeries::new(&id, format!("Synthetic {}", i + 1), truth.mode, &points)?);
        countries.push(CountryTruth {
            country_id: id,
            phase2,
            phase3,
            segmentation,
        });
    }
    let store = DataStore::from_series(
        truth.mode,
        series,
        StoreMetadata {
            source: format!("synthetic seed {seed}"),
            vintage: None,
        },
    )?;
    Ok((
        store,
        SyntheticManifest {
            truth: truth.clone(),
            seed,
            countries,
        },
    ))
}
