//! TFR panel ingestion, period normalization, phase segmentation and pool
//! selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default TFR level below which two consecutive increases mark Phase III.
pub const DEFAULT_PHASE3_THRESHOLD: f64 = 2.1;

/// Default ceiling used to select the low-fertility pool.
pub const DEFAULT_LOW_THRESHOLD: f64 = 1.5;

const CSV_HEADER: [&str; 4] = ["country_id", "country_name", "year", "tfr"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Annual,
    FiveYear,
}

impl Mode {
    pub fn period_length(self) -> i32 {
        match self {
            Mode::Annual => 1,
            Mode::FiveYear => 5,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Annual => "annual",
            Mode::FiveYear => "five-year",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "annual" => Ok(Mode::Annual),
            "five-year" | "5" => Ok(Mode::FiveYear),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub period_start: i32,
    pub period_length: i32,
    pub tfr: f64,
}

impl Observation {
    pub fn period_end(&self) -> i32 {
        self.period_start + self.period_length
    }
}

/// One country's observed TFR, evenly spaced without gaps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfrSeries {
    pub country_id: String,
    pub country_name: String,
    observations: Vec<Observation>,
    mode: Mode,
}

impl TfrSeries {
    /// Builds a series from `(period_start, tfr)` pairs, checking order,
    /// positivity and spacing.
    pub fn new(
        country_id: impl Into<String>,
        country_name: impl Into<String>,
        mode: Mode,
        points: &[(i32, f64)],
    ) -> Result<Self> {
        let country_id = country_id.into();
        let step = mode.period_length();
        let mut observations = Vec::with_capacity(points.len());
        for (i, &(year, tfr)) in points.iter().enumerate() {
            if !(tfr > 0.0) || !tfr.is_finite() {
                return Err(Error::NonPositiveTfr {
                    line: 0,
                    country_id,
                    year,
                    value: tfr,
                });
            }
            if i > 0 {
                let prev = points[i - 1].0;
                if year == prev {
                    return Err(Error::DuplicatePeriod {
                        line: 0,
                        country_id,
                        year,
                    });
                }
                if year - prev != step {
                    return Err(Error::PeriodGap {
                        country_id,
                        prev,
                        next: year,
                        spacing: step,
                    });
                }
            }
            observations.push(Observation {
                period_start: year,
                period_length: step,
                tfr,
            });
        }
        Ok(TfrSeries {
            country_name: country_name.into(),
            country_id,
            observations,
            mode,
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.tfr).collect()
    }

    pub fn last(&self) -> Option<&Observation> {
        self.observations.last()
    }

    pub fn index_of_period(&self, period_start: i32) -> Option<usize> {
        self.observations
            .iter()
            .position(|o| o.period_start == period_start)
    }

    /// Observations whose period ends at or before `cutoff`.
    pub fn truncated(&self, cutoff: i32) -> TfrSeries {
        TfrSeries {
            country_id: self.country_id.clone(),
            country_name: self.country_name.clone(),
            observations: self
                .observations
                .iter()
                .copied()
                .filter(|o| o.period_end() <= cutoff)
                .collect(),
            mode: self.mode,
        }
    }
}

/// Boundaries of the modelled transition phases within one series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSegmentation {
    pub phase2_start: usize,
    pub phase3_start: Option<usize>,
    pub threshold: f64,
}

impl PhaseSegmentation {
    /// Index range of the Phase II segment; the Phase III trough closes it.
    pub fn phase2_range(&self, len: usize) -> std::ops::Range<usize> {
        let end = match self.phase3_start {
            Some(p3) => (p3 + 1).min(len),
            None => len,
        };
        self.phase2_start.min(end)..end
    }

    pub fn phase3_range(&self, len: usize) -> Option<std::ops::Range<usize>> {
        self.phase3_start.map(|p3| p3.min(len)..len)
    }

    pub fn in_phase3(&self) -> bool {
        self.phase3_start.is_some()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreMetadata {
    pub source: String,
    pub vintage: Option<i32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataStore {
    series: BTreeMap<String, TfrSeries>,
    pub metadata: StoreMetadata,
    mode: Mode,
}

impl DataStore {
    pub fn from_series(
        mode: Mode,
        series: impl IntoIterator<Item = TfrSeries>,
        metadata: StoreMetadata,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for s in series {
            if s.mode != mode {
                return Err(Error::WrongMode {
                    country_id: s.country_id.clone(),
                    expected: mode.to_string(),
                    found: s.mode.to_string(),
                });
            }
            if map.contains_key(&s.country_id) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate country {}",
                    s.country_id
                )));
            }
            map.insert(s.country_id.clone(), s);
        }
        Ok(DataStore {
            series: map,
            metadata,
            mode,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TfrSeries> {
        self.series.get(id)
    }

    pub fn series(&self) -> impl Iterator<Item = &TfrSeries> {
        self.series.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.series.keys().map(String::as_str)
    }

    pub fn first_period(&self) -> Option<i32> {
        self.series
            .values()
            .filter_map(|s| s.observations.first())
            .map(|o| o.period_start)
            .min()
    }

    /// End year of the latest observed period.
    pub fn last_period_end(&self) -> Option<i32> {
        self.series
            .values()
            .filter_map(|s| s.last())
            .map(Observation::period_end)
            .max()
    }

    /// The store restricted to periods ending at or before `cutoff`.
    /// Countries left without observations are dropped.
    pub fn truncated(&self, cutoff: i32) -> DataStore {
        DataStore {
            series: self
                .series
                .iter()
                .map(|(k, s)| (k.clone(), s.truncated(cutoff)))
                .filter(|(_, s)| !s.is_empty())
                .collect(),
            metadata: self.metadata.clone(),
            mode: self.mode,
        }
    }

    /// Serializes back to the input CSV layout, rows ordered by country then
    /// period.
    pub fn to_csv(&self) -> String {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        wtr.write_record(CSV_HEADER).expect("write to Vec");
        for s in self.series.values() {
            for o in &s.observations {
                wtr.write_record([
                    s.country_id.as_str(),
                    s.country_name.as_str(),
                    &o.period_start.to_string(),
                    &o.tfr.to_string(),
                ])
                .expect("write to Vec");
            }
        }
        String::from_utf8(wtr.into_inner().expect("flush Vec")).expect("utf-8 input")
    }
}

#[derive(Debug, serde::Deserialize)]
struct CsvRow {
    country_id: String,
    country_name: String,
    year: i32,
    tfr: f64,
}

/// Parses the `country_id,country_name,year,tfr` panel format.
pub fn parse_tfr_csv(text: &str, mode: Mode) -> Result<DataStore> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let headers = rdr.headers().map_err(|e| Error::MalformedRow {
        line: 1,
        message: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::MalformedRow {
            line: 1,
            message: format!(
                "expected header {:?}, found {:?}",
                CSV_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    // country -> (name, year -> (tfr, line))
    let mut grouped: BTreeMap<String, (String, BTreeMap<i32, (f64, u64)>)> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::MalformedRow {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: CsvRow = record
            .deserialize(None)
            .map_err(|e| Error::MalformedRow {
                line,
                message: e.to_string(),
            })?;
        if !(row.tfr > 0.0) || !row.tfr.is_finite() {
            return Err(Error::NonPositiveTfr {
                line,
                country_id: row.country_id,
                year: row.year,
                value: row.tfr,
            });
        }
        let entry = grouped
            .entry(row.country_id.clone())
            .or_insert_with(|| (row.country_name.clone(), BTreeMap::new()));
        if entry.0 != row.country_name {
            return Err(Error::MalformedRow {
                line,
                message: format!(
                    "country {} named both {:?} and {:?}",
                    row.country_id, entry.0, row.country_name
                ),
            });
        }
        if entry.1.insert(row.year, (row.tfr, line)).is_some() {
            return Err(Error::DuplicatePeriod {
                line,
                country_id: row.country_id,
                year: row.year,
            });
        }
    }

    let mut series = Vec::with_capacity(grouped.len());
    for (id, (name, rows)) in grouped {
        let points: Vec<(i32, f64)> = rows.iter().map(|(&y, &(v, _))| (y, v)).collect();
        series.push(TfrSeries::new(id, name, mode, &points)?);
    }
    DataStore::from_series(
        mode,
        series,
        StoreMetadata {
            source: "csv".into(),
            vintage: None,
        },
    )
}

/// Replaces consecutive blocks of five annual values by their mean; a
/// trailing partial block is dropped.
pub fn five_year_average(series: &TfrSeries) -> Result<TfrSeries> {
    if series.mode != Mode::Annual {
        return Err(Error::WrongMode {
            country_id: series.country_id.clone(),
            expected: Mode::Annual.to_string(),
            found: series.mode.to_string(),
        });
    }
    if series.len() < 5 {
        return Err(Error::SeriesTooShort {
            country_id: series.country_id.clone(),
            len: series.len(),
            min: 5,
        });
    }
    let points: Vec<(i32, f64)> = series
        .observations
        .chunks_exact(5)
        .map(|block| {
            let mean = block.iter().map(|o| o.tfr).sum::<f64>() / 5.0;
            (block[0].period_start, mean)
        })
        .collect();
    TfrSeries::new(
        series.country_id.clone(),
        series.country_name.clone(),
        Mode::FiveYear,
        &points,
    )
}

/// Phase boundaries from the value sequence alone.
///
/// Phase II starts at the global maximum (earliest on ties). Phase III starts
/// at the earliest trough `m` after that with `v[m] < v[m+1] < v[m+2]` and all
/// three below `threshold`.
pub fn classify_values(values: &[f64], threshold: f64) -> Option<(usize, Option<usize>)> {
    let (phase2, _) = values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        })?;
    let phase3 = (phase2..values.len().saturating_sub(2)).find(|&m| {
        values[m] < values[m + 1] && values[m + 1] < values[m + 2] && values[m + 2] < threshold
    });
    Some((phase2, phase3))
}

/// Segments a five-year series into Phase II and (optionally) Phase III.
pub fn classify_phases(series: &TfrSeries, threshold: f64) -> Result<PhaseSegmentation> {
    if series.mode != Mode::FiveYear {
        return Err(Error::WrongMode {
            country_id: series.country_id.clone(),
            expected: Mode::FiveYear.to_string(),
            found: series.mode.to_string(),
        });
    }
    let (phase2_start, phase3_start) = classify_values(&series.values(), threshold)
        .ok_or_else(|| Error::EmptySeries(series.country_id.clone()))?;
    Ok(PhaseSegmentation {
        phase2_start,
        phase3_start,
        threshold,
    })
}

/// Annual-mode segmentation: the Phase III rule runs on five-year block
/// means and the trough block maps back to its first year.
pub fn classify_phases_annual(series: &TfrSeries, threshold: f64) -> Result<PhaseSegmentation> {
    if series.is_empty() {
        return Err(Error::EmptySeries(series.country_id.clone()));
    }
    let (phase2_start, _) =
        classify_values(&series.values(), threshold).expect("non-empty series");
    let phase3_start = if series.len() >= 5 {
        let blocks = five_year_average(series)?;
        classify_phases(&blocks, threshold)?
            .phase3_start
            .map(|b| (b * 5).max(phase2_start))
    } else {
        None
    };
    Ok(PhaseSegmentation {
        phase2_start,
        phase3_start,
        threshold,
    })
}

/// Mode-dispatching segmentation used by the pipeline.
pub fn classify(series: &TfrSeries, threshold: f64) -> Result<PhaseSegmentation> {
    match series.mode {
        Mode::FiveYear => classify_phases(series, threshold),
        Mode::Annual => classify_phases_annual(series, threshold),
    }
}

pub fn classify_store(
    store: &DataStore,
    threshold: f64,
) -> Result<BTreeMap<String, PhaseSegmentation>> {
    store
        .series()
        .map(|s| Ok((s.country_id.clone(), classify(s, threshold)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoolCriterion {
    All,
    /// Countries whose TFR in the period starting at `reference_period` is at
    /// most `threshold`. Countries without that period are left out.
    LowFertility { threshold: f64, reference_period: i32 },
    /// A fixed list, resolved beforehand.
    Listed { ids: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountrySet {
    pub ids: BTreeSet<String>,
    pub criterion: PoolCriterion,
}

impl CountrySet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.contains(id)
    }

    /// The same membership as an explicit list.
    pub fn as_listed(&self) -> PoolCriterion {
        PoolCriterion::Listed {
            ids: self.ids.iter().cloned().collect(),
        }
    }
}

pub fn select_pool(store: &DataStore, criterion: &PoolCriterion) -> Result<CountrySet> {
    let ids: BTreeSet<String> = match criterion {
        PoolCriterion::All => store.ids().map(str::to_owned).collect(),
        PoolCriterion::LowFertility {
            threshold,
            reference_period,
        } => store
            .series()
            .filter(|s| {
                s.index_of_period(*reference_period)
                    .is_some_and(|i| s.observations[i].tfr <= *threshold)
            })
            .map(|s| s.country_id.clone())
            .collect(),
        PoolCriterion::Listed { ids } => ids
            .iter()
            .filter(|id| store.get(id).is_some())
            .cloned()
            .collect(),
    };
    if ids.is_empty() {
        return Err(Error::EmptyPool(format!("{criterion:?}")));
    }
    Ok(CountrySet {
        ids,
        criterion: criterion.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn five(values: &[f64]) -> TfrSeries {
        let pts: Vec<(i32, f64)> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| (1950 + 5 * i as i32, v))
            .collect();
        TfrSeries::new("X", "X", Mode::FiveYear, &pts).unwrap()
    }

    fn annual(start: i32, values: &[f64]) -> TfrSeries {
        let pts: Vec<(i32, f64)> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| (start + i as i32, v))
            .collect();
        TfrSeries::new("X", "X", Mode::Annual, &pts).unwrap()
    }

    #[test]
    fn parses_two_countries() {
        let text = "country_id,country_name,year,tfr\n\
                    A,Alpha,1950,3.0\nA,Alpha,1955,2.5\nA,Alpha,1960,2.0\n\
                    B,Beta,1960,4.0\nB,Beta,1950,5.0\nB,Beta,1955,4.5\n";
        let store = parse_tfr_csv(text, Mode::FiveYear).unwrap();
        assert_eq!(store.len(), 2);
        let b = store.get("B").unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.values(), vec![5.0, 4.5, 4.0]);
        assert_eq!(b.mode(), Mode::FiveYear);
    }

    #[test]
    fn negative_tfr_names_the_row() {
        let text = "country_id,country_name,year,tfr\nA,Alpha,1950,3.0\nA,Alpha,1955,-0.3\n";
        match parse_tfr_csv(text, Mode::FiveYear) {
            Err(Error::NonPositiveTfr { line, year, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(year, 1955);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_and_duplicate_rows() {
        let bad = "country_id,country_name,year,tfr\nA,Alpha,19x0,3.0\n";
        assert!(matches!(
            parse_tfr_csv(bad, Mode::FiveYear),
            Err(Error::MalformedRow { line: 2, .. })
        ));
        let dup = "country_id,country_name,year,tfr\nA,Alpha,1950,3.0\nA,Alpha,1950,2.0\n";
        assert!(matches!(
            parse_tfr_csv(dup, Mode::FiveYear),
            Err(Error::DuplicatePeriod { line: 3, .. })
        ));
        let header = "id,name,year,tfr\nA,Alpha,1950,3.0\n";
        assert!(matches!(
            parse_tfr_csv(header, Mode::FiveYear),
            Err(Error::MalformedRow { line: 1, .. })
        ));
    }

    #[test]
    fn gaps_and_spacing_are_rejected() {
        let gap = "country_id,country_name,year,tfr\nA,Alpha,1950,3.0\nA,Alpha,1960,2.0\n";
        assert!(matches!(
            parse_tfr_csv(gap, Mode::FiveYear),
            Err(Error::PeriodGap { .. })
        ));
        let five = "country_id,country_name,year,tfr\nA,Alpha,1950,3.0\nA,Alpha,1955,2.0\n";
        assert!(matches!(
            parse_tfr_csv(five, Mode::Annual),
            Err(Error::PeriodGap { .. })
        ));
    }

    #[test]
    fn puerto_rico_round_trip() {
        let text = "country_id,country_name,year,tfr\n\
                    PRI,Puerto Rico,2015,1.3\nPRI,Puerto Rico,2016,1.2\nPRI,Puerto Rico,2017,1.1\n";
        let store = parse_tfr_csv(text, Mode::Annual).unwrap();
        let out = store.to_csv();
        assert_eq!(out, text);
        let again = parse_tfr_csv(&out, Mode::Annual).unwrap();
        assert_eq!(again.get("PRI").unwrap().observations()[2].tfr, 1.1);
    }

    #[test]
    fn names_with_commas_survive() {
        let text = "country_id,country_name,year,tfr\n\
                    HKG,\"China, Hong Kong SAR\",2015,1.1\n";
        let store = parse_tfr_csv(text, Mode::FiveYear).unwrap();
        assert_eq!(store.get("HKG").unwrap().country_name, "China, Hong Kong SAR");
        assert_eq!(store.to_csv(), text);
    }

    #[test]
    fn five_year_average_blocks() {
        let s = annual(2000, &[1.0; 10]);
        let f = five_year_average(&s).unwrap();
        assert_eq!(f.values(), vec![1.0, 1.0]);
        assert_eq!(f.observations()[1].period_start, 2005);

        let s = annual(2000, &[2.0, 2.0, 2.0, 1.0, 1.0]);
        let f = five_year_average(&s).unwrap();
        assert_eq!(f.len(), 1);
        assert!((f.values()[0] - 1.6).abs() < 1e-12);

        let s = annual(2000, &[1.5; 12]);
        assert_eq!(five_year_average(&s).unwrap().len(), 2);

        let s = annual(2000, &[1.5; 4]);
        assert!(matches!(
            five_year_average(&s),
            Err(Error::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn phase_rule_examples() {
        let seg = classify_phases(&five(&[3.0, 2.5, 2.0, 1.8, 1.85, 1.9]), 2.1).unwrap();
        assert_eq!(seg.phase2_start, 0);
        assert_eq!(seg.phase3_start, Some(3));

        let seg = classify_phases(&five(&[5.0, 4.0, 3.0, 2.0, 1.5]), 2.1).unwrap();
        assert_eq!(seg.phase3_start, None);

        // Second increase ends exactly at the threshold.
        let seg = classify_phases(&five(&[2.3, 1.9, 2.0, 2.1, 2.2]), 2.1).unwrap();
        assert_eq!(seg.phase3_start, None);
        let seg = classify_phases(&five(&[2.3, 1.9, 1.95, 2.0, 2.2]), 2.1).unwrap();
        assert_eq!(seg.phase3_start, Some(1));
    }

    #[test]
    fn ties_pick_earliest_maximum() {
        let seg = classify_phases(&five(&[6.6, 6.6, 6.6, 5.0]), 2.1).unwrap();
        assert_eq!(seg.phase2_start, 0);
    }

    #[test]
    fn classify_requires_five_year_mode() {
        let s = annual(2000, &[2.0; 6]);
        assert!(matches!(
            classify_phases(&s, 2.1),
            Err(Error::WrongMode { .. })
        ));
    }

    #[test]
    fn annual_trough_maps_to_first_year_of_block() {
        let mut vals = Vec::new();
        for block in [3.0, 2.5, 1.8, 1.85, 1.9] {
            vals.extend_from_slice(&[block; 5]);
        }
        vals[0] = 3.2;
        let seg = classify_phases_annual(&annual(1990, &vals), 2.1).unwrap();
        assert_eq!(seg.phase2_start, 0);
        assert_eq!(seg.phase3_start, Some(10));
    }

    #[test]
    fn pool_selection() {
        let text = "country_id,country_name,year,tfr\n\
                    A,Alpha,2010,2.0\nA,Alpha,2015,1.2\n\
                    B,Beta,2010,2.0\nB,Beta,2015,1.8\n\
                    C,Gamma,2010,1.4\n";
        let store = parse_tfr_csv(text, Mode::FiveYear).unwrap();
        assert_eq!(select_pool(&store, &PoolCriterion::All).unwrap().len(), 3);
        let low = select_pool(
            &store,
            &PoolCriterion::LowFertility {
                threshold: 1.5,
                reference_period: 2015,
            },
        )
        .unwrap();
        assert_eq!(low.ids.iter().collect::<Vec<_>>(), vec!["A"]);
        assert!(matches!(
            select_pool(
                &store,
                &PoolCriterion::LowFertility {
                    threshold: 0.1,
                    reference_period: 2015
                }
            ),
            Err(Error::EmptyPool(_))
        ));
    }

    #[test]
    fn truncation_keeps_complete_periods() {
        let s = five(&[3.0, 2.5, 2.0, 1.8]);
        let t = s.truncated(1960);
        assert_eq!(t.values(), vec![3.0, 2.5]);
    }
}
