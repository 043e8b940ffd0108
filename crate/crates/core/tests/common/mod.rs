#![allow(dead_code)]

use tfrproj::mcmc::McmcSettings;
use tfrproj::{fit, parse_tfr_csv, DataStore, FitConfig, FitResult, Mode, PoolCriterion};

pub const FIXTURE: &str = include_str!("../../data/wpp2022_tfr5.csv");

pub fn fixture() -> DataStore {
    parse_tfr_csv(FIXTURE, Mode::FiveYear).unwrap()
}

pub fn listed(ids: &[&str]) -> PoolCriterion {
    PoolCriterion::Listed {
        ids: ids.iter().map(|s| s.to_string()).collect(),
    }
}

pub fn low_pool() -> PoolCriterion {
    PoolCriterion::LowFertility {
        threshold: 1.5,
        reference_period: 2015,
    }
}

pub fn quick_fit(store: &DataStore, pool: PoolCriterion, iterations: usize, seed: u64) -> FitResult {
    let mut config = FitConfig::new(store.mode(), pool);
    config.mcmc = McmcSettings {
        iterations,
        burn_in: iterations / 2,
        thin: 2,
        chains: 3,
        seed,
        ..McmcSettings::default()
    };
    fit(store, &config).unwrap()
}
