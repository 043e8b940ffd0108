//! Command-line front end: `fit`, `project` and `validate`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{parse_tfr_csv, select_pool, DataStore, Mode, PoolCriterion, DEFAULT_LOW_THRESHOLD};
use crate::error::{Error, Result};
use crate::mcmc::McmcSettings;
use crate::pipeline::{fit, FitConfig, FitResult};
use crate::projection::{convergence_report, project, ProjectionConfig, SimulationOptions};
use crate::rng::sha256_hex;
use crate::validation::{cross_validate, fit_diagnostics, ValidationConfig, Window};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "tfrproj", version, about = "Probabilistic projection of total fertility rates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the Phase II and Phase III hierarchies and write the chains.
    Fit(FitArgs),
    /// Simulate trajectories from fitted chains and write quantile fans.
    Project(ProjectArgs),
    /// Goodness of fit and cross-validation reports.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolArg {
    All,
    Low,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Annual,
    FiveYear,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Annual => Mode::Annual,
            ModeArg::FiveYear => Mode::FiveYear,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TFR panel CSV with header `country_id,country_name,year,tfr`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "five-year")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 2023)]
    pub seed: u64,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub pool: PoolArg,
    #[arg(long, default_value_t = DEFAULT_LOW_THRESHOLD)]
    pub low_threshold: f64,
    /// Period whose TFR decides membership of the low-fertility pool.
    #[arg(long, default_value_t = 2015)]
    pub low_reference_period: i32,
    #[arg(long, default_value_t = crate::data::DEFAULT_PHASE3_THRESHOLD)]
    pub phase3_threshold: f64,
    #[arg(long, default_value_t = 3)]
    pub chains: usize,
    #[arg(long, default_value_t = 20_000)]
    pub iter: usize,
    #[arg(long, default_value_t = 10_000)]
    pub burnin: usize,
    #[arg(long, default_value_t = 10)]
    pub thin: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SimulationArgs {
    #[arg(long, default_value_t = 2050)]
    pub horizon_end_year: i32,
    #[arg(long, default_value_t = 2000)]
    pub trajectories: usize,
    /// Project even if the convergence gate fails.
    #[arg(long)]
    pub force: bool,
    /// Comma-separated country ids; all pooled countries by default.
    #[arg(long, value_delimiter = ',')]
    pub countries: Option<Vec<String>>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ProjectArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub simulation: SimulationArgs,
    /// Also write every simulated trajectory.
    #[arg(long)]
    pub save_trajectories: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub simulation: SimulationArgs,
    /// First year of the goodness-of-fit window.
    #[arg(long, default_value_t = 1950)]
    pub window_start: i32,
    /// Last year of the goodness-of-fit window; the estimation uses data up
    /// to here. Defaults to the end of the data.
    #[arg(long)]
    pub window_end: Option<i32>,
    /// Also estimate from data up to this year and score the later periods.
    #[arg(long)]
    pub cutoff: Option<i32>,
}

#[derive(Debug, Serialize)]
struct InputDigest {
    path: String,
    sha256: Option<String>,
}

#[derive(Debug, Serialize)]
struct ErrorRecord {
    kind: String,
    message: String,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    config: Value,
    seed: u64,
    inputs: Vec<InputDigest>,
    tool_version: String,
    started_unix: u64,
    wall_clock_seconds: f64,
    outputs: Vec<String>,
    status: String,
    error: Option<ErrorRecord>,
}

/// Output paths relative to `--out-dir`, plus free-form results for the
/// manifest.
#[derive(Default)]
struct Outcome {
    outputs: Vec<String>,
    details: Value,
}

struct Context {
    out_dir: PathBuf,
    outputs: Vec<String>,
}

impl Context {
    fn write(&mut self, rel: &str, contents: &str) -> Result<()> {
        let path = self.out_dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(rel.to_owned());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        self.write(rel, &(serde_json::to_string_pretty(value)? + "\n"))
    }
}

fn read_input(path: &Path, mode: Mode) -> Result<(DataStore, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = sha256_hex(&bytes);
    let text = String::from_utf8(bytes).map_err(|e| Error::MalformedRow {
        line: 0,
        message: format!("input is not UTF-8: {e}"),
    })?;
    Ok((parse_tfr_csv(&text, mode)?, digest))
}

fn digest_file(path: &Path) -> InputDigest {
    InputDigest {
        path: path.display().to_string(),
        sha256: fs::read(path).ok().map(|b| sha256_hex(&b)),
    }
}

/// Pool criterion resolved against the full store into an explicit list.
fn resolve_pool(store: &DataStore, model: &ModelArgs) -> Result<PoolCriterion> {
    match model.pool {
        PoolArg::All => Ok(PoolCriterion::All),
        PoolArg::Low => {
            let criterion = PoolCriterion::LowFertility {
                threshold: model.low_threshold,
                reference_period: model.low_reference_period,
            };
            Ok(select_pool(store, &criterion)?.as_listed())
        }
    }
}

fn fit_config(common: &CommonArgs, model: &ModelArgs, pool: PoolCriterion) -> FitConfig {
    FitConfig {
        mode: common.mode.into(),
        pool,
        phase3_threshold: model.phase3_threshold,
        mcmc: McmcSettings {
            iterations: model.iter,
            burn_in: model.burnin,
            thin: model.thin,
            chains: model.chains,
            seed: common.seed,
            ..McmcSettings::default()
        },
    }
}

fn projection_config(common: &CommonArgs, sim: &SimulationArgs, keep: bool) -> ProjectionConfig {
    ProjectionConfig {
        horizon_end_year: sim.horizon_end_year,
        trajectories: sim.trajectories,
        seed: common.seed,
        force: sim.force,
        keep_trajectories: keep,
        simulation: SimulationOptions::default(),
        ..ProjectionConfig::default()
    }
}

fn rhat_json(fit: &FitResult) -> Result<Value> {
    let report = convergence_report(fit)?;
    Ok(Value::Object(
        report
            .into_iter()
            .map(|(k, r)| (k, serde_json::to_value(r).expect("serializable")))
            .collect(),
    ))
}

fn cmd_fit(args: &FitArgs, ctx: &mut Context) -> Result<Value> {
    let (store, digest) = read_input(&args.common.input, args.common.mode.into())?;
    let pool = resolve_pool(&store, &args.model)?;
    let config = fit_config(&args.common, &args.model, pool);
    config.mcmc.validate()?;
    let result = fit(&store, &config)?;
    let chains = ctx.out_dir.join("chains");
    fs::create_dir_all(&chains).map_err(|e| Error::io(&chains, e))?;
    for name in result.write(&chains, &digest)? {
        ctx.outputs.push(format!("chains/{name}"));
    }
    let rhat = rhat_json(&result)?;
    ctx.write_json("reports/convergence.json", &rhat)?;
    Ok(json!({
        "config": config,
        "pool": result.pool.ids,
        "pool_size": result.pool.len(),
        "phase2_countries": result.phase2.countries,
        "phase3_countries": result.phase3.countries,
    }))
}

fn cmd_project(args: &ProjectArgs, ctx: &mut Context) -> Result<Value> {
    let (store, digest) = read_input(&args.common.input, args.common.mode.into())?;
    let chains = ctx.out_dir.join("chains");
    let fitted = FitResult::load(&chains, &store, &digest)?;
    let config = projection_config(&args.common, &args.simulation, args.save_trajectories);
    let fans = project(&store, &fitted, &config, args.simulation.countries.as_deref())?;
    let mut combined = String::new();
    for (id, fan) in &fans {
        let csv = fan.to_csv();
        if combined.is_empty() {
            combined.push_str("country_id,");
            combined.push_str(csv.lines().next().unwrap_or_default());
            combined.push('\n');
        }
        for line in csv.lines().skip(1) {
            combined.push_str(id);
            combined.push(',');
            combined.push_str(line);
            combined.push('\n');
        }
        ctx.write(&format!("projections/{id}.csv"), &csv)?;
        if let Some(t) = fan.trajectories_csv() {
            ctx.write(&format!("projections/{id}_trajectories.csv"), &t)?;
        }
    }
    ctx.write("projections/fans.csv", &combined)?;
    ctx.write_json("reports/convergence.json", &rhat_json(&fitted)?)?;
    Ok(json!({ "config": config, "countries": fans.keys().collect::<Vec<_>>() }))
}

fn cmd_validate(args: &ValidateArgs, ctx: &mut Context) -> Result<Value> {
    let mode: Mode = args.common.mode.into();
    let (store, _) = read_input(&args.common.input, mode)?;
    let pool = resolve_pool(&store, &args.model)?;
    let config = fit_config(&args.common, &args.model, pool);
    config.mcmc.validate()?;
    let last = store.last_period_end().ok_or(Error::EmptyInput)?;
    let window = Window {
        start: args.window_start,
        end: args.window_end.unwrap_or(last),
    };
    let in_window = store.truncated(window.end);
    let fitted = fit(&in_window, &config)?;
    let report = fit_diagnostics(&in_window, &fitted, window)?;
    ctx.write("reports/fit_report.txt", &report.to_table())?;
    ctx.write_json("reports/fit_report.json", &report)?;
    let mut details = json!({
        "config": config,
        "window": window,
        "total_coverage": report.total_coverage,
        "total_rmse": report.total_rmse,
        "total_mae": report.total_mae,
    });
    if let Some(cutoff) = args.cutoff {
        let vc = ValidationConfig {
            fit: config.clone(),
            projection: projection_config(&args.common, &args.simulation, false),
            countries: args.simulation.countries.clone(),
        };
        let holdout = cross_validate(&store, cutoff, &vc)?;
        ctx.write(&format!("reports/holdout_{cutoff}.txt"), &holdout.to_table())?;
        ctx.write_json(&format!("reports/holdout_{cutoff}.json"), &holdout)?;
        details["holdout_coverage"] = json!(holdout.coverage);
    }
    Ok(details)
}

fn error_json(e: &Error) -> Value {
    json!({ "error": { "kind": e.kind(), "message": e.to_string() } })
}

fn exit_code(e: &Error) -> i32 {
    if e.is_input_error() {
        EXIT_USAGE
    } else {
        EXIT_FAILURE
    }
}

fn common(cmd: &Command) -> &CommonArgs {
    match cmd {
        Command::Fit(a) => &a.common,
        Command::Project(a) => &a.common,
        Command::Validate(a) => &a.common,
    }
}

fn configure_threads(jobs: Option<usize>) {
    if let Some(n) = jobs {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Runs a parsed command and returns the process exit code. The manifest is
/// written whether or not the command succeeds.
pub fn run(cli: &Cli) -> i32 {
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let common = common(&cli.command).clone();
    configure_threads(common.jobs);
    let mut ctx = Context {
        out_dir: common.out_dir.clone(),
        outputs: Vec::new(),
    };
    let (name, result) = match &cli.command {
        Command::Fit(a) => ("fit", cmd_fit(a, &mut ctx)),
        Command::Project(a) => ("project", cmd_project(a, &mut ctx)),
        Command::Validate(a) => ("validate", cmd_validate(a, &mut ctx)),
    };
    let outcome = match &result {
        Ok(details) => Outcome {
            outputs: ctx.outputs.clone(),
            details: details.clone(),
        },
        Err(_) => Outcome {
            outputs: ctx.outputs.clone(),
            ..Outcome::default()
        },
    };
    let manifest = RunManifest {
        command: name.to_owned(),
        config: json!({ "args": format!("{:?}", cli.command), "result": outcome.details }),
        seed: common.seed,
        inputs: vec![digest_file(&common.input)],
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        started_unix,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        outputs: outcome.outputs,
        status: if result.is_ok() { "ok" } else { "error" }.to_owned(),
        error: result.as_ref().err().map(|e| ErrorRecord {
            kind: e.kind().to_owned(),
            message: e.to_string(),
        }),
    };
    let manifest_written = fs::create_dir_all(&common.out_dir)
        .and_then(|_| {
            let text = serde_json::to_string_pretty(&manifest).expect("serializable") + "\n";
            fs::write(common.out_dir.join("manifest.json"), text)
        });
    if let Err(e) = &manifest_written {
        log::error!("could not write manifest: {e}");
    }
    match result {
        Ok(details) => {
            println!("{}", serde_json::to_string_pretty(&details).expect("serializable"));
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            exit_code(&e)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}
