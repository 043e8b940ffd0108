//! Estimation pipeline: segment phases, select the pool, then sample Phase II
//! and Phase III.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    classify_store, select_pool, CountrySet, DataStore, Mode, PhaseSegmentation, PoolCriterion,
    DEFAULT_PHASE3_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::mcmc::{
    run_phase2_mcmc, run_phase3_mcmc, ChainKind, ChainSet, McmcConfig, McmcSettings,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub mode: Mode,
    pub pool: PoolCriterion,
    pub phase3_threshold: f64,
    pub mcmc: McmcSettings,
}

impl FitConfig {
    pub fn new(mode: Mode, pool: PoolCriterion) -> Self {
        FitConfig {
            mode,
            pool,
            phase3_threshold: DEFAULT_PHASE3_THRESHOLD,
            mcmc: McmcSettings::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub config: FitConfig,
    pub pool: CountrySet,
    pub phases: BTreeMap<String, PhaseSegmentation>,
    pub phase2: ChainSet,
    pub phase3: ChainSet,
}

/// Record written next to the chain files so a later projection can rebuild
/// the fit context from the same data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub config: FitConfig,
    pub pool: CountrySet,
    pub data_sha256: String,
    pub phase2_countries: Vec<String>,
    pub phase3_countries: Vec<String>,
}

/// Pool members that have at least one Phase II transition.
pub fn phase2_pool(
    store: &DataStore,
    phases: &BTreeMap<String, PhaseSegmentation>,
    pool: &CountrySet,
) -> CountrySet {
    let ids = pool
        .ids
        .iter()
        .filter(|id| {
            match (store.get(id.as_str()), phases.get(id.as_str())) {
                (Some(s), Some(seg)) => seg.phase2_range(s.len()).len() >= 2,
                _ => false,
            }
        })
        .cloned()
        .collect();
    CountrySet {
        ids,
        criterion: pool.criterion.clone(),
    }
}

pub fn fit(store: &DataStore, config: &FitConfig) -> Result<FitResult> {
    if store.mode() != config.mode {
        return Err(Error::InvalidConfig(format!(
            "data are {} but the fit is configured for {}",
            store.mode(),
            config.mode
        )));
    }
    let phases = classify_store(store, config.phase3_threshold)?;
    let pool = select_pool(store, &config.pool)?;
    let p2_pool = phase2_pool(store, &phases, &pool);
    if p2_pool.is_empty() {
        return Err(Error::EmptyPool("no pooled country has Phase II data".into()));
    }
    let p2_config = McmcConfig {
        settings: config.mcmc.clone(),
        pool: p2_pool,
        mode: config.mode,
    };
    let phase2 = run_phase2_mcmc(store, &phases, &p2_config)?;
    let p3_config = McmcConfig {
        pool: pool.clone(),
        ..p2_config
    };
    let phase3 = run_phase3_mcmc(store, &phases, &p3_config)?;
    Ok(FitResult {
        config: config.clone(),
        pool,
        phases,
        phase2,
        phase3,
    })
}

impl FitResult {
    pub fn record(&self, data_sha256: &str) -> FitRecord {
        FitRecord {
            config: self.config.clone(),
            pool: self.pool.clone(),
            data_sha256: data_sha256.to_owned(),
            phase2_countries: self.phase2.countries.clone(),
            phase3_countries: self.phase3.countries.clone(),
        }
    }

    /// Writes `phase2.{csv,json}`, `phase3.{csv,json}` and `fit.json` into
    /// `dir`; returns the written file names.
    pub fn write(&self, dir: &Path, data_sha256: &str) -> Result<Vec<String>> {
        self.phase2.write(dir, data_sha256)?;
        self.phase3.write(dir, data_sha256)?;
        let path = dir.join("fit.json");
        let text = serde_json::to_string_pretty(&self.record(data_sha256))? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(["phase2.csv", "phase2.json", "phase3.csv", "phase3.json", "fit.json"]
            .iter()
            .map(|s| s.to_string())
            .collect())
    }

    /// Loads a fit written by [`write`](Self::write), checking that every
    /// file matches its recorded digest and that `store` is the data the
    /// chains were fitted to.
    pub fn load(dir: &Path, store: &DataStore, data_sha256: &str) -> Result<FitResult> {
        let path = dir.join("fit.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record: FitRecord = serde_json::from_str(&text).map_err(|e| Error::ChainFile {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if record.data_sha256 != data_sha256 {
            return Err(Error::DigestMismatch {
                path,
                expected: record.data_sha256,
                found: data_sha256.to_owned(),
            });
        }
        let (phase2, m2) = ChainSet::read(dir, ChainKind::Phase2)?;
        let (phase3, m3) = ChainSet::read(dir, ChainKind::Phase3)?;
        for m in [&m2, &m3] {
            if m.data_sha256 != data_sha256 {
                return Err(Error::DigestMismatch {
                    path: dir.join(&m.csv_file),
                    expected: m.data_sha256.clone(),
                    found: data_sha256.to_owned(),
                });
            }
        }
        let phases = classify_store(store, record.config.phase3_threshold)?;
        Ok(FitResult {
            config: record.config,
            pool: record.pool,
            phases,
            phase2,
            phase3,
        })
    }
}
