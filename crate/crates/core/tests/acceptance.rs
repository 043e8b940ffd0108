//! Acceptance report: one PASS/FAIL line per criterion.

use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use tfrproj::data::{classify_phases, select_pool, Mode, PoolCriterion, TfrSeries};
use tfrproj::kernel::{phase3_step_mean, Phase2Params, Phase3Params, VarianceParams};
use tfrproj::mcmc::phase2::Phase2Layout;
use tfrproj::mcmc::phase3::Phase3Layout;
use tfrproj::mcmc::{
    run_phase2_mcmc, run_phase3_mcmc, McmcConfig, McmcSettings, Phase3Hyper, VarianceSetting,
};
use tfrproj::projection::{check_convergence, quantile_fan, quantile_type7, DEFAULT_QUANTILES};
use tfrproj::synthetic::{generate_synthetic, SyntheticKind, SyntheticTruth};
use tfrproj::validation::{coverage, cross_validate, fit_diagnostics, ValidationConfig, Window};
use tfrproj::{
    double_logistic_decrement, fit, parse_tfr_csv, project, DataStore, Error, FitConfig,
    FitResult, ProjectionConfig,
};

const FIXTURE: &str = include_str!("../data/wpp2022_tfr5.csv");

// AC1
const KERNEL_TOL: f64 = 1e-12;
// AC3
const MU_HITS_MIN: usize = 8;
const D_SDS: f64 = 3.0;
const CALIBRATION_REPLICATES: u64 = 20;
const CALIBRATION_MIN: f64 = 0.85;
// AC4
const TOTAL_COVERAGE: (f64, f64) = (0.94, 0.04);
const PRI_COVERAGE_MIN: f64 = 0.94;
const KOR_COVERAGE_MIN: f64 = 0.96;
const CUB_COVERAGE: (f64, f64) = (0.90, 0.06);
const RMSE_TARGET: f64 = 0.1312;
const MAE_TARGET: f64 = 0.0687;
const RELATIVE_TOL: f64 = 0.5;
// AC6
const MEDIAN_RANGE: (f64, f64) = (0.8, 1.4);
const REFERENCE_INTERVAL: (f64, f64) = (0.56, 1.77);
const MIN_OVERLAP: f64 = 0.5;
// AC7
const RHAT_BOUND: f64 = 1.1;

struct Report {
    passed: usize,
    failed: usize,
}

impl Report {
    fn line(&mut self, id: &str, ok: bool, detail: String) {
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
        println!("{} {id}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

fn fixture() -> DataStore {
    parse_tfr_csv(FIXTURE, Mode::FiveYear).unwrap()
}

fn low() -> PoolCriterion {
    PoolCriterion::LowFertility {
        threshold: 1.5,
        reference_period: 2015,
    }
}

fn ac1() -> (bool, String) {
    let p = Phase2Params::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
    let errs: Vec<f64> = [1.5, 2.5]
        .iter()
        .map(|&f| (double_logistic_decrement(f, &p) - 20.0 / 41.0).abs())
        .collect();
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    (worst <= KERNEL_TOL, format!("max |g - 20/41| = {worst:.2e} (tol {KERNEL_TOL:.0e})"))
}

fn five(values: &[f64]) -> TfrSeries {
    let pts: Vec<(i32, f64)> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| (1950 + 5 * i as i32, v))
        .collect();
    TfrSeries::new("P", "P", Mode::FiveYear, &pts).unwrap()
}

fn property<S: Strategy>(name: &str, strategy: S, test: impl Fn(S::Value) -> bool) -> Option<String>
where
    S::Value: std::fmt::Debug,
{
    let mut runner = TestRunner::new(Config {
        cases: 256,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&strategy, |v| {
            prop_assert!(test(v));
            Ok(())
        })
        .err()
        .map(|e| format!("{name}: {e}"))
}

fn ac2() -> (bool, String) {
    let vals = || prop::collection::vec(0.8..7.5f64, 1..20);
    let mut failures: Vec<String> = Vec::new();
    failures.extend(property("phase-rule idempotence", vals(), |v| {
        let a = classify_phases(&five(&v), 2.1).unwrap();
        let b = classify_phases(&five(&v), 2.1).unwrap();
        a == b
    }));
    failures.extend(property(
        "quantile monotonicity",
        prop::collection::vec(prop::collection::vec(0.5..8.0f64, 3), 1..50),
        |rows| {
            quantile_fan(&rows, &DEFAULT_QUANTILES)
                .iter()
                .all(|q| q.windows(2).all(|w| w[0] <= w[1]))
        },
    ));
    failures.extend(property(
        "coverage monotonicity",
        (prop::collection::vec((0.5..8.0f64, 0.5..8.0f64, 0.0..1.0f64), 1..50), 0.0..2.0f64),
        |(rows, w)| {
            let obs: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let iv: Vec<(f64, f64)> = rows.iter().map(|r| (r.1 - r.2, r.1 + r.2)).collect();
            let wide: Vec<(f64, f64)> = iv.iter().map(|&(a, b)| (a - w, b + w)).collect();
            coverage(&obs, &wide).unwrap() >= coverage(&obs, &iv).unwrap()
        },
    ));
    failures.extend(property(
        "AR(1) contraction",
        (0.0..2.1f64, 0.0..1.0f64, 0.0..8.0f64),
        |(mu, rho, f)| {
            let q = Phase3Params {
                mu,
                rho,
                sigma_eps: 0.1,
            };
            ((phase3_step_mean(f, &q) - mu).abs() - rho * (f - mu).abs()).abs() <= 1e-12
        },
    ));

    let store = fixture();
    let pool = PoolCriterion::Listed {
        ids: ["PRI", "KOR", "SGP", "TWN", "NLD"].iter().map(|s| s.to_string()).collect(),
    };
    let mut config = FitConfig::new(Mode::FiveYear, pool);
    config.mcmc = McmcSettings {
        iterations: 600,
        burn_in: 300,
        thin: 2,
        ..McmcSettings::default()
    };
    let a = fit(&store, &config).unwrap();
    let b = fit(&store, &config).unwrap();
    if a.phase2.to_csv() != b.phase2.to_csv() || a.phase3.to_csv() != b.phase3.to_csv() {
        failures.push("determinism under seed".into());
    }

    let poisoned = parse_tfr_csv(
        &store
            .to_csv()
            .lines()
            .map(|l| {
                let cols: Vec<&str> = l.rsplitn(3, ',').collect();
                match cols[1].parse::<i32>() {
                    Ok(y) if y + 5 > 2000 => format!("{},{y},9.99\n", cols[2]),
                    _ => format!("{l}\n"),
                }
            })
            .collect::<String>(),
        Mode::FiveYear,
    )
    .unwrap();
    let vc = ValidationConfig {
        fit: config,
        projection: ProjectionConfig {
            trajectories: 200,
            force: true,
            ..ProjectionConfig::default()
        },
        countries: Some(vec!["PRI".into()]),
    };
    let x = cross_validate(&store, 2000, &vc).unwrap();
    let y = cross_validate(&poisoned, 2000, &vc).unwrap();
    let same = x
        .periods
        .iter()
        .zip(&y.periods)
        .all(|(p, q)| (p.lower, p.median, p.upper) == (q.lower, q.median, q.upper));
    if !same {
        failures.push("cutoff-poisoning isolation".into());
    }
    let ok = failures.is_empty();
    let detail = if ok {
        "phase rule, quantiles, coverage, contraction, determinism, cutoff isolation".into()
    } else {
        failures.join("; ")
    };
    (ok, detail)
}

fn interval(draws: &mut [f64]) -> (f64, f64, f64, f64) {
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (quantile_type7(draws, 0.025), quantile_type7(draws, 0.975), mean, sd)
}

fn synthetic_settings(iterations: usize, seed: u64) -> McmcSettings {
    McmcSettings {
        iterations,
        burn_in: iterations / 2,
        thin: 5,
        chains: 3,
        seed,
        ..McmcSettings::default()
    }
}

fn hyper() -> Phase3Hyper {
    Phase3Hyper {
        mu_bar: 1.8,
        sigma_mu: 0.25,
        rho_bar: 0.75,
        sigma_rho: 0.1,
        sigma_eps: 0.1,
    }
}

fn mu_hits(seed: u64, iterations: usize) -> usize {
    let truth = SyntheticTruth {
        mode: Mode::FiveYear,
        start_year: 1950,
        hyper: hyper(),
        kind: SyntheticKind::Phase3Only { start_offset: 0.6 },
        noise_scale: 1.0,
    };
    let (store, manifest) = generate_synthetic(&truth, 10, 12, seed).unwrap();
    let config = McmcConfig {
        settings: synthetic_settings(iterations, seed),
        pool: select_pool(&store, &PoolCriterion::All).unwrap(),
        mode: Mode::FiveYear,
    };
    let set = run_phase3_mcmc(&store, &manifest.phases(), &config).unwrap();
    let layout = Phase3Layout::new(&set).unwrap();
    manifest
        .countries
        .iter()
        .filter(|c| {
            let mut mu: Vec<f64> = set
                .draws()
                .map(|d| layout.params(d, &c.country_id).unwrap().mu)
                .collect();
            let (lo, hi, _, _) = interval(&mut mu);
            lo <= c.phase3.mu && c.phase3.mu <= hi
        })
        .count()
}

fn ac3() -> (bool, String) {
    let hits = mu_hits(11, 10_000);

    let truth = SyntheticTruth {
        mode: Mode::FiveYear,
        start_year: 1950,
        hyper: hyper(),
        kind: SyntheticKind::Transition {
            phase2: Phase2Params::new(1.2, 1.5, 1.0, 1.8, 1.0).unwrap(),
            start_level: None,
            variance: VarianceParams::default(),
            annual: None,
        },
        noise_scale: 1.0,
    };
    let (store, manifest) = generate_synthetic(&truth, 1, 14, 3).unwrap();
    let mut settings = synthetic_settings(5000, 3);
    settings.variance = VarianceSetting::Fixed(VarianceParams::default());
    let config = McmcConfig {
        settings,
        pool: select_pool(&store, &PoolCriterion::All).unwrap(),
        mode: Mode::FiveYear,
    };
    let set = run_phase2_mcmc(&store, &manifest.phases(), &config).unwrap();
    let layout = Phase2Layout::new(&set).unwrap();
    let mut d: Vec<f64> = set.draws().map(|x| layout.params(x, "S001").unwrap().d).collect();
    let (_, _, mean, sd) = interval(&mut d);
    let d_true = manifest.countries[0].phase2.unwrap().d;
    let z = (mean - d_true).abs() / sd;

    let total: usize = (0..CALIBRATION_REPLICATES).map(|r| mu_hits(100 + r, 4000)).sum();
    let cal = total as f64 / (10 * CALIBRATION_REPLICATES) as f64;

    let ok = hits >= MU_HITS_MIN && z <= D_SDS && cal >= CALIBRATION_MIN;
    (
        ok,
        format!(
            "mu inside 95%: {hits}/10 (need {MU_HITS_MIN}); d: |mean - truth| = {z:.2} sd (need <= {D_SDS}); calibration {:.1}% over {CALIBRATION_REPLICATES} replicates (need >= {:.0}%)",
            100.0 * cal,
            100.0 * CALIBRATION_MIN
        ),
    )
}

fn default_fit(store: &DataStore, pool: PoolCriterion) -> FitResult {
    fit(store, &FitConfig::new(Mode::FiveYear, pool)).unwrap()
}

fn within(x: f64, (target, tol): (f64, f64)) -> bool {
    (x - target).abs() <= tol + 1e-12
}

fn ac4(store: &DataStore, low_fit: &FitResult) -> (bool, String) {
    let report = fit_diagnostics(store, low_fit, Window { start: 1950, end: 2020 }).unwrap();
    let cov = |id: &str| report.country(id).map_or(f64::NAN, |c| c.coverage);
    let (pri, kor, cub) = (cov("PRI"), cov("KOR"), cov("CUB"));
    let rel = |x: f64, t: f64| (x - t).abs() / t;
    let checks = [
        ("total", within(report.total_coverage, TOTAL_COVERAGE)),
        ("PRI", pri >= PRI_COVERAGE_MIN),
        ("KOR", kor >= KOR_COVERAGE_MIN),
        ("CUB", within(cub, CUB_COVERAGE)),
        ("RMSE", rel(report.total_rmse, RMSE_TARGET) <= RELATIVE_TOL),
        ("MAE", rel(report.total_mae, MAE_TARGET) <= RELATIVE_TOL),
    ];
    let missed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    (
        missed.is_empty(),
        format!(
            "total {:.1}% (94±4), PRI {:.1}% (>=94), KOR {:.1}% (>=96), CUB {:.1}% (90±6), RMSE {:.4} (0.1312±50%), MAE {:.4} (0.0687±50%){}",
            100.0 * report.total_coverage,
            100.0 * pri,
            100.0 * kor,
            100.0 * cub,
            report.total_rmse,
            report.total_mae,
            if missed.is_empty() { String::new() } else { format!("; missed: {}", missed.join(", ")) }
        ),
    )
}

fn ac5(store: &DataStore) -> (bool, String) {
    let holdout = |pool: PoolCriterion| {
        let pool = select_pool(store, &pool).unwrap().as_listed();
        let vc = ValidationConfig {
            fit: FitConfig::new(Mode::FiveYear, pool),
            projection: ProjectionConfig::default(),
            countries: Some(vec!["PRI".into()]),
        };
        cross_validate(store, 2000, &vc).unwrap()
    };
    let all = holdout(PoolCriterion::All);
    let excluded: Vec<i32> = all
        .country_periods("PRI")
        .filter(|p| p.period_start >= 2015 && !p.inside)
        .map(|p| p.period_start)
        .collect();
    let low = holdout(low());
    let groups: Vec<String> = low
        .groups
        .iter()
        .map(|g| format!("{} {}", g.label, if g.inside { "inside" } else { "outside" }))
        .collect();
    let low_ok = low.groups.len() == 2 && low.groups.iter().all(|g| g.inside);
    let periods: Vec<String> = low
        .country_periods("PRI")
        .map(|p| format!("{}: {:.2} in [{:.3}, {:.3}]", p.period_start, p.observed, p.lower, p.upper))
        .collect();
    (
        !excluded.is_empty() && low_ok,
        format!(
            "all-country fan excludes PRI at {:?}; low pool groups: {} ({})",
            excluded,
            groups.join(", "),
            periods.join("; ")
        ),
    )
}

fn ac6(store: &DataStore, low_fit: &FitResult) -> (bool, String) {
    let fans = project(store, low_fit, &ProjectionConfig::default(), Some(&["PRI".to_string()])).unwrap();
    let pri = &fans["PRI"];
    let k = pri.period_index(2045).unwrap();
    let at = |l: f64| pri.level(l).unwrap()[k];
    let (lo, med, hi) = (at(0.025), at(0.5), at(0.975));
    let overlap = (hi.min(REFERENCE_INTERVAL.1) - lo.max(REFERENCE_INTERVAL.0)).max(0.0) / (hi - lo);
    let ok = (MEDIAN_RANGE.0..=MEDIAN_RANGE.1).contains(&med) && overlap >= MIN_OVERLAP;
    (
        ok,
        format!(
            "PRI 2045-2050 median {med:.3} (need [{}, {}]), 95% ({lo:.3}, {hi:.3}), overlap with (0.56, 1.77) {:.0}% of width (need >= {:.0}%)",
            MEDIAN_RANGE.0,
            MEDIAN_RANGE.1,
            100.0 * overlap,
            100.0 * MIN_OVERLAP
        ),
    )
}

fn ac7(store: &DataStore, low_fit: &FitResult) -> (bool, String) {
    let all_fit = default_fit(store, PoolCriterion::All);
    let mut worst = Vec::new();
    let mut ok = true;
    for (name, f) in [("all", &all_fit), ("low", low_fit)] {
        let report = tfrproj::projection::convergence_report(f).unwrap();
        let (coord, max) = report
            .iter()
            .filter_map(|(n, r)| match r {
                tfrproj::mcmc::Rhat::Value(v) => Some((n.clone(), *v)),
                tfrproj::mcmc::Rhat::NotApplicable => None,
            })
            .fold((String::new(), 0.0), |acc, (n, v)| if v > acc.1 { (n, v) } else { acc });
        ok &= check_convergence(f, RHAT_BOUND).is_ok();
        worst.push(format!("{name} pool max R-hat {max:.3} ({coord})"));
    }
    let mut broken = low_fit.clone();
    let col = broken.phase3.column("mu_bar").unwrap();
    for d in &mut broken.phase3.chains[0] {
        d[col] += 1.0;
    }
    let blocked = matches!(
        project(store, &broken, &ProjectionConfig { trajectories: 100, ..ProjectionConfig::default() }, None),
        Err(Error::ConvergenceGate(_))
    );
    let forced = project(
        store,
        &broken,
        &ProjectionConfig {
            trajectories: 100,
            force: true,
            ..ProjectionConfig::default()
        },
        None,
    )
    .is_ok();
    (
        ok && blocked && forced,
        format!(
            "{} (bound {RHAT_BOUND}); unconverged fit blocked: {blocked}, forced: {forced}",
            worst.join(", ")
        ),
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut report = Report { passed: 0, failed: 0 };
    let timed = |f: &dyn Fn() -> (bool, String)| {
        let t = Instant::now();
        let (ok, detail) = f();
        (ok, format!("{detail} [{:.1}s]", t.elapsed().as_secs_f64()))
    };
    let (ok, d) = timed(&ac1);
    report.line("AC1 kernel exactness", ok, d);
    let (ok, d) = timed(&ac2);
    report.line("AC2 property suite", ok, d);
    let (ok, d) = timed(&ac3);
    report.line("AC3 synthetic recovery", ok, d);

    let store = fixture();
    let low_fit = default_fit(&store, low());
    let (ok, d) = timed(&|| ac4(&store, &low_fit));
    report.line("AC4 fit diagnostics 1950-2020", ok, d);
    let (ok, d) = timed(&|| ac5(&store));
    report.line("AC5 cross-validation from 2000", ok, d);
    let (ok, d) = timed(&|| ac6(&store, &low_fit));
    report.line("AC6 Puerto Rico 2045-2050", ok, d);
    let (ok, d) = timed(&|| ac7(&store, &low_fit));
    report.line("AC7 convergence gate", ok, d);
    println!(
        "acceptance: {} passed, {} failed",
        report.passed, report.failed
    );
}
