//! Recorded MCMC draws and their on-disk form: a CSV with one row per draw
//! plus a JSON sidecar manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Mode;
use crate::error::{Error, Result};
use crate::rng::sha256_hex;

use super::McmcSettings;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainKind {
    Phase2,
    Phase3,
}

impl ChainKind {
    pub fn label(self) -> &'static str {
        match self {
            ChainKind::Phase2 => "phase2",
            ChainKind::Phase3 => "phase3",
        }
    }
}

/// Draws of several independent chains over the same named coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainSet {
    pub kind: ChainKind,
    pub mode: Mode,
    pub names: Vec<String>,
    /// chain → recorded draw → coordinate
    pub chains: Vec<Vec<Vec<f64>>>,
    pub countries: Vec<String>,
    pub settings: McmcSettings,
    pub acceptance_rates: BTreeMap<String, f64>,
}

impl ChainSet {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn chain_count(&self) -> usize {
        self.chains.len()
    }

    pub fn draws_per_chain(&self) -> usize {
        self.chains.first().map_or(0, Vec::len)
    }

    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    /// Draw `i` in chain-major order.
    pub fn draw(&self, i: usize) -> &[f64] {
        let per = self.draws_per_chain();
        &self.chains[i / per][i % per]
    }

    pub fn draws(&self) -> impl Iterator<Item = &[f64]> {
        self.chains.iter().flat_map(|c| c.iter().map(Vec::as_slice))
    }

    /// One coordinate split by chain.
    pub fn coordinate(&self, col: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.iter().map(|d| d[col]).collect())
            .collect()
    }

    /// Coordinates shared by the whole pool (not country-indexed, not the
    /// log-posterior).
    pub fn pool_coordinates(&self) -> Vec<&str> {
        self.names
            .iter()
            .map(String::as_str)
            .filter(|n| !n.contains('[') && *n != LOG_POSTERIOR)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("chain,draw");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (c, chain) in self.chains.iter().enumerate() {
            for (i, draw) in chain.iter().enumerate() {
                out.push_str(&c.to_string());
                out.push(',');
                out.push_str(&i.to_string());
                for v in draw {
                    out.push(',');
                    out.push_str(&v.to_string());
                }
                out.push('\n');
            }
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, data_digest: &str) -> Result<ChainManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = self.to_csv();
        let stem = self.kind.label();
        let csv_path = dir.join(format!("{stem}.csv"));
        fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
        let manifest = ChainManifest {
            kind: self.kind,
            mode: self.mode,
            csv_file: format!("{stem}.csv"),
            csv_sha256: sha256_hex(csv.as_bytes()),
            data_sha256: data_digest.to_owned(),
            settings: self.settings.clone(),
            countries: self.countries.clone(),
            acceptance_rates: self.acceptance_rates.clone(),
            coordinate_count: self.names.len(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        };
        let json_path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
        Ok(manifest)
    }

    /// Reads a chain file pair, rejecting it when the CSV does not match the
    /// digest recorded in its manifest.
    pub fn read(dir: &Path, kind: ChainKind) -> Result<(ChainSet, ChainManifest)> {
        let stem = kind.label();
        let json_path = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let manifest: ChainManifest =
            serde_json::from_str(&text).map_err(|e| Error::ChainFile {
                path: json_path.clone(),
                message: e.to_string(),
            })?;
        let csv_path = dir.join(&manifest.csv_file);
        let csv = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let found = sha256_hex(csv.as_bytes());
        if found != manifest.csv_sha256 {
            return Err(Error::DigestMismatch {
                path: csv_path,
                expected: manifest.csv_sha256.clone(),
                found,
            });
        }
        let set = Self::parse_csv(&csv, &manifest).map_err(|message| Error::ChainFile {
            path: csv_path,
            message,
        })?;
        Ok((set, manifest))
    }

    fn parse_csv(text: &str, manifest: &ChainManifest) -> std::result::Result<ChainSet, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty chain file")?;
        let mut cols = header.split(',');
        if cols.next() != Some("chain") || cols.next() != Some("draw") {
            return Err("header must start with chain,draw".into());
        }
        let names: Vec<String> = cols.map(str::to_owned).collect();
        if names.len() != manifest.coordinate_count {
            return Err(format!(
                "{} coordinates, manifest says {}",
                names.len(),
                manifest.coordinate_count
            ));
        }
        let mut chains: Vec<Vec<Vec<f64>>> = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let mut fields = line.split(',');
            let chain: usize = fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| format!("line {}: bad chain index", lineno + 2))?;
            fields.next();
            let draw: Vec<f64> = fields
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| format!("line {}: {e}", lineno + 2))?;
            if draw.len() != names.len() {
                return Err(format!("line {}: wrong field count", lineno + 2));
            }
            if chain == chains.len() {
                chains.push(Vec::new());
            }
            chains
                .get_mut(chain)
                .ok_or_else(|| format!("line {}: chains out of order", lineno + 2))?
                .push(draw);
        }
        if chains.is_empty() || chains.iter().any(|c| c.len() != chains[0].len()) {
            return Err("chains are empty or of unequal length".into());
        }
        Ok(ChainSet {
            kind: manifest.kind,
            mode: manifest.mode,
            names,
            chains,
            countries: manifest.countries.clone(),
            settings: manifest.settings.clone(),
            acceptance_rates: manifest.acceptance_rates.clone(),
        })
    }
}

pub const LOG_POSTERIOR: &str = "lp__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainManifest {
    pub kind: ChainKind,
    pub mode: Mode,
    pub csv_file: String,
    pub csv_sha256: String,
    pub data_sha256: String,
    pub settings: McmcSettings,
    pub countries: Vec<String>,
    pub acceptance_rates: BTreeMap<String, f64>,
    pub coordinate_count: usize,
    pub tool_version: String,
}
