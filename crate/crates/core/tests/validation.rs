mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use tfrproj::data::{classify_phases, CountrySet, Mode, PoolCriterion, StoreMetadata};
use tfrproj::kernel::{phase2_step_mean, Phase2Params, VarianceParams};
use tfrproj::mcmc::{phase2, phase3, ChainKind, ChainSet, McmcSettings, VarianceSetting};
use tfrproj::projection::ProjectionConfig;
use tfrproj::validation::{
    coverage, cross_validate, fit_diagnostics, mae, rmse, NormalMixture, ValidationConfig, Window,
};
use tfrproj::{DataStore, Error, FitConfig, FitResult, TfrSeries};

fn one_draw_fit(store: &DataStore, p: &Phase2Params, v: &VarianceParams) -> FitResult {
    let ids = vec!["X".to_string()];
    let names = phase2::coordinate_names(&ids, false);
    let mut draw = vec![0.0; names.len()];
    let set = |draw: &mut Vec<f64>, name: &str, x: f64| {
        let i = names.iter().position(|n| n == name).unwrap();
        draw[i] = x;
    };
    for (name, x) in [
        ("sigma0", v.sigma0),
        ("S", v.s),
        ("a", v.a),
        ("b", v.b),
        ("c0", v.c0),
        ("d[X]", p.d),
        ("delta1[X]", p.delta1),
        ("delta2[X]", p.delta2),
        ("delta3[X]", p.delta3),
        ("delta4[X]", p.delta4),
    ] {
        set(&mut draw, name, x);
    }
    let settings = McmcSettings {
        variance: VarianceSetting::Fixed(*v),
        ..McmcSettings::default()
    };
    let p3_names = phase3::coordinate_names(&[]);
    let p3_draw = vec![0.0, 1.8, 0.2, 0.8, 0.1, 0.1];
    let pool = CountrySet {
        ids: ids.iter().cloned().collect(),
        criterion: PoolCriterion::All,
    };
    let phases: BTreeMap<_, _> = [(
        "X".to_string(),
        classify_phases(store.get("X").unwrap(), 2.1).unwrap(),
    )]
    .into();
    FitResult {
        config: FitConfig::new(Mode::FiveYear, PoolCriterion::All),
        pool,
        phases,
        phase2: ChainSet {
            kind: ChainKind::Phase2,
            mode: Mode::FiveYear,
            names,
            chains: vec![vec![draw]],
            countries: ids,
            settings: settings.clone(),
            acceptance_rates: BTreeMap::new(),
        },
        phase3: ChainSet {
            kind: ChainKind::Phase3,
            mode: Mode::FiveYear,
            names: p3_names,
            chains: vec![vec![p3_draw]],
            countries: vec![],
            settings,
            acceptance_rates: BTreeMap::new(),
        },
    }
}

#[test]
fn single_draw_without_noise_scores_exact_matches() {
    let p = Phase2Params::new(1.0, 1.5, 1.2, 1.6, 1.0).unwrap();
    let v = VarianceParams {
        sigma0: 1e-12,
        s: 3.5,
        a: 0.0,
        b: 0.0,
        c0: 1.0,
        sd_floor: 1e-12,
    };
    let mut vals = vec![5.0];
    for _ in 0..6 {
        vals.push(phase2_step_mean(*vals.last().unwrap(), &p));
    }
    vals[6] -= 0.01;
    let pts: Vec<(i32, f64)> = vals.iter().enumerate().map(|(i, &x)| (1980 + 5 * i as i32, x)).collect();
    let series = TfrSeries::new("X", "X", Mode::FiveYear, &pts).unwrap();
    let store = DataStore::from_series(Mode::FiveYear, vec![series], StoreMetadata::default()).unwrap();
    let fit = one_draw_fit(&store, &p, &v);
    let report = fit_diagnostics(&store, &fit, Window { start: 1950, end: 2020 }).unwrap();
    assert_eq!(report.records.len(), 6);
    let covered: Vec<bool> = report.records.iter().map(|r| r.covered).collect();
    assert_eq!(covered, [true, true, true, true, true, false]);
    assert!((report.total_coverage - 5.0 / 6.0).abs() < 1e-15);
    assert!((report.total_rmse - (0.01f64.powi(2) / 6.0).sqrt()).abs() < 1e-9);
    assert!((report.total_mae - 0.01 / 6.0).abs() < 1e-9);
}

#[test]
fn point_mass_mixture_quantiles_are_order_statistics() {
    let m = NormalMixture::new(vec![(3.0, 0.0), (1.0, 0.0), (2.0, 0.0), (4.0, 0.0)]);
    assert_eq!(m.quantile(0.5), 2.0);
    assert_eq!(m.quantile(0.025), 1.0);
    assert_eq!(m.quantile(0.975), 4.0);
    assert_eq!(m.cdf(2.5), 0.5);
}

#[test]
fn mixture_of_one_normal_has_normal_quantiles() {
    let m = NormalMixture::new(vec![(2.0, 0.5)]);
    assert!((m.quantile(0.975) - (2.0 + 0.5 * 1.959_963_984_540_054)).abs() < 1e-9);
    assert!((m.quantile(0.5) - 2.0).abs() < 1e-12);
}

#[test]
fn fixture_report_totals_match_records() {
    let store = common::fixture();
    let fit = common::quick_fit(&store, common::listed(&["PRI", "KOR", "CUB", "JPN", "ITA"]), 800, 4);
    let report = fit_diagnostics(&store, &fit, Window { start: 1950, end: 2020 }).unwrap();
    let n = report.records.len() as f64;
    let ss: f64 = report.records.iter().map(|r| (r.observed - r.predicted).powi(2)).sum();
    let sa: f64 = report.records.iter().map(|r| (r.observed - r.predicted).abs()).sum();
    assert_eq!(report.total_rmse, (ss / n).sqrt());
    assert!((report.total_mae - sa / n).abs() < 1e-15);
    let weighted: f64 = report
        .countries
        .iter()
        .map(|c| c.coverage * c.transitions as f64)
        .sum::<f64>()
        / report.countries.iter().map(|c| c.transitions as f64).sum::<f64>();
    assert!((weighted - report.total_coverage).abs() < 1e-12);
    assert!(report.records.iter().all(|r| r.lower <= r.predicted && r.predicted <= r.upper));
    assert!(report.to_table().contains("Puerto Rico"));
    assert!(matches!(
        fit_diagnostics(&store, &fit, Window { start: 2030, end: 2040 }),
        Err(Error::EmptyWindow(_))
    ));
}

fn cv_config() -> ValidationConfig {
    let mut fit = FitConfig::new(Mode::FiveYear, common::listed(&["PRI", "KOR", "SGP", "TWN", "NLD"]));
    fit.mcmc = McmcSettings {
        iterations: 600,
        burn_in: 300,
        thin: 2,
        ..McmcSettings::default()
    };
    ValidationConfig {
        fit,
        projection: ProjectionConfig {
            trajectories: 200,
            force: true,
            ..ProjectionConfig::default()
        },
        countries: Some(vec!["PRI".into(), "KOR".into()]),
    }
}

#[test]
fn holdout_ignores_everything_after_the_cutoff() {
    let store = common::fixture();
    let poisoned_rows: String = common::FIXTURE
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.rsplitn(3, ',').collect();
            match (i, cols[1].parse::<i32>()) {
                (0, _) => format!("{line}\n"),
                (_, Ok(year)) if year + 5 > 2000 => format!("{},{},{}\n", cols[2], year, 7.77),
                _ => format!("{line}\n"),
            }
        })
        .collect();
    let poisoned = tfrproj::parse_tfr_csv(&poisoned_rows, Mode::FiveYear).unwrap();
    assert_ne!(poisoned, store);
    let a = cross_validate(&store, 2000, &cv_config()).unwrap();
    let b = cross_validate(&poisoned, 2000, &cv_config()).unwrap();
    assert_eq!(a.periods.len(), 8);
    for (x, y) in a.periods.iter().zip(&b.periods) {
        assert_eq!((x.lower, x.median, x.upper), (y.lower, y.median, y.upper));
        assert_eq!(y.observed, 7.77);
    }
    let labels: Vec<&str> = a.groups.iter().map(|g| g.label.as_str()).collect();
    assert_eq!(labels, ["2001-2010", "2011-2020", "2001-2010", "2011-2020"]);
}

#[test]
fn cutoff_outside_the_data_is_rejected() {
    let store = common::fixture();
    for cutoff in [1950, 2015, 2030] {
        assert!(matches!(
            cross_validate(&store, cutoff, &cv_config()),
            Err(Error::CutoffOutOfRange { .. })
        ));
    }
}

#[test]
fn metric_errors() {
    assert!(matches!(coverage(&[], &[]), Err(Error::EmptyInput)));
    assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch { .. })));
    assert!(matches!(mae(&[], &[]), Err(Error::EmptyInput)));
}

fn paired() -> impl Strategy<Value = Vec<(f64, f64, f64, f64)>> {
    prop::collection::vec((0.5..8.0f64, 0.5..8.0f64, 0.0..1.0f64, 0.0..1.0f64), 1..50)
}

proptest! {
    #[test]
    fn metrics_are_permutation_invariant(rows in paired(), rot in 0usize..50) {
        let split = |r: &[(f64, f64, f64, f64)]| {
            let obs: Vec<f64> = r.iter().map(|x| x.0).collect();
            let pred: Vec<f64> = r.iter().map(|x| x.1).collect();
            let iv: Vec<(f64, f64)> = r.iter().map(|x| (x.1 - x.2, x.1 + x.3)).collect();
            (obs, pred, iv)
        };
        let (o, p, iv) = split(&rows);
        let mut perm = rows.clone();
        perm.rotate_left(rot % rows.len());
        perm.reverse();
        let (o2, p2, iv2) = split(&perm);
        prop_assert_eq!(coverage(&o, &iv).unwrap(), coverage(&o2, &iv2).unwrap());
        prop_assert!((rmse(&o, &p).unwrap() - rmse(&o2, &p2).unwrap()).abs() < 1e-12);
        prop_assert!((mae(&o, &p).unwrap() - mae(&o2, &p2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn widening_never_lowers_coverage(rows in paired(), widen in 0.0..2.0f64) {
        let obs: Vec<f64> = rows.iter().map(|x| x.0).collect();
        let iv: Vec<(f64, f64)> = rows.iter().map(|x| (x.1 - x.2, x.1 + x.3)).collect();
        let wide: Vec<(f64, f64)> = iv.iter().map(|&(lo, hi)| (lo - widen, hi + widen)).collect();
        prop_assert!(coverage(&obs, &wide).unwrap() >= coverage(&obs, &iv).unwrap());
    }
}
