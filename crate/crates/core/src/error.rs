use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    MalformedRow { line: u64, message: String },

    #[error("line {line}: non-positive TFR {value} for {country_id} in {year}")]
    NonPositiveTfr {
        line: u64,
        country_id: String,
        year: i32,
        value: f64,
    },

    #[error("line {line}: duplicate period {year} for {country_id}")]
    DuplicatePeriod {
        line: u64,
        country_id: String,
        year: i32,
    },

    #[error("gap in periods for {country_id}: {prev} is followed by {next} (expected spacing {spacing})")]
    PeriodGap {
        country_id: String,
        prev: i32,
        next: i32,
        spacing: i32,
    },

    #[error("series {country_id} is too short: {len} observations, need at least {min}")]
    SeriesTooShort {
        country_id: String,
        len: usize,
        min: usize,
    },

    #[error("series {0} has no observations")]
    EmptySeries(String),

    #[error("series {country_id} is in {found} mode, expected {expected}")]
    WrongMode {
        country_id: String,
        expected: String,
        found: String,
    },

    #[error("country pool is empty ({0})")]
    EmptyPool(String),

    #[error("unknown country {0}")]
    UnknownCountry(String),

    #[error("segment too short: {len} observations, need at least {min}")]
    SegmentTooShort { len: usize, min: usize },

    #[error("country {0} has no Phase II transitions")]
    NoPhase2Transitions(String),

    #[error("Phase III hierarchy needs at least 2 countries, found {0}")]
    Phase3Unidentifiable(usize),

    #[error("log-posterior is not finite at initialization ({0})")]
    NonFiniteLogPosterior(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("missing parameter block for {0}")]
    MissingParameters(String),

    #[error("convergence gate failed: {0}")]
    ConvergenceGate(String),

    #[error("trajectory count {count} is below the floor {floor}")]
    TooFewTrajectories { count: usize, floor: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("cutoff {cutoff} outside the observed range {first}..{last}")]
    CutoffOutOfRange { cutoff: i32, first: i32, last: i32 },

    #[error("no Phase II transitions inside window {0}")]
    EmptyWindow(String),

    #[error("chain file {path}: {message}")]
    ChainFile { path: PathBuf, message: String },

    #[error("{path}: digest mismatch (expected {expected}, found {found})")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short label used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedRow { .. } => "malformed_row",
            Error::NonPositiveTfr { .. } => "non_positive_tfr",
            Error::DuplicatePeriod { .. } => "duplicate_period",
            Error::PeriodGap { .. } => "period_gap",
            Error::SeriesTooShort { .. } => "series_too_short",
            Error::EmptySeries(_) => "empty_series",
            Error::WrongMode { .. } => "wrong_mode",
            Error::EmptyPool(_) => "empty_pool",
            Error::UnknownCountry(_) => "unknown_country",
            Error::SegmentTooShort { .. } => "segment_too_short",
            Error::NoPhase2Transitions(_) => "no_phase2_transitions",
            Error::Phase3Unidentifiable(_) => "phase3_unidentifiable",
            Error::NonFiniteLogPosterior(_) => "non_finite_log_posterior",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::MissingParameters(_) => "missing_parameters",
            Error::ConvergenceGate(_) => "convergence_gate",
            Error::TooFewTrajectories { .. } => "too_few_trajectories",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::EmptyInput => "empty_input",
            Error::CutoffOutOfRange { .. } => "cutoff_out_of_range",
            Error::EmptyWindow(_) => "empty_window",
            Error::ChainFile { .. } => "chain_file",
            Error::DigestMismatch { .. } => "digest_mismatch",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    /// True for failures caused by the caller's inputs (files, flags, data)
    /// rather than by the computation itself.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::MalformedRow { .. }
                | Error::NonPositiveTfr { .. }
                | Error::DuplicatePeriod { .. }
                | Error::PeriodGap { .. }
                | Error::WrongMode { .. }
                | Error::UnknownCountry(_)
                | Error::InvalidConfig(_)
                | Error::CutoffOutOfRange { .. }
                | Error::ChainFile { .. }
                | Error::DigestMismatch { .. }
                | Error::Io { .. }
                | Error::Json(_)
        )
    }
}
