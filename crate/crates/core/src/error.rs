use thiserror::Error;

/// Errors raised by the simulation, diagnostics and verification layers.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid dimension {0}: only d in {{1, 2, 3}} is supported")]
    InvalidDimension(usize),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("unsupported initial density kind `{0}`")]
    UnsupportedDensity(String),

    #[error("singular input: zero displacement with an unregularized kernel")]
    SingularInput,

    #[error("collision between particles {i} and {j} (|X_i - X_j| = {distance:e}){}", time_suffix(.time))]
    Collision {
        i: usize,
        j: usize,
        distance: f64,
        time: Option<f64>,
    },

    #[error("non-finite state at step {step} (t = {time})")]
    NonFiniteState { step: usize, time: f64 },

    #[error("N = {n} exceeds the exact-evaluation limit {limit}; subsample explicitly")]
    TooLarge { n: usize, limit: usize },

    #[error("window eps = {eps} is shorter than two time steps (dt = {dt})")]
    WindowTooCoarse { eps: f64, dt: f64 },

    #[error("trajectory lacks {0}")]
    MissingRecord(&'static str),

    #[error("beta = {beta} outside the admissible interval ({lo}, {hi})")]
    InvalidBeta { beta: f64, lo: f64, hi: f64 },

    #[error("d = 1 has an empty admissible beta interval; request the short-time estimator (beta = 1)")]
    UnsupportedDimension,

    #[error("window [{start}, {end}] is longer than eps = {eps}")]
    InvalidWindow { start: f64, end: f64, eps: f64 },

    #[error("outer scale eta = {eta} must exceed inner scale eps = {eps}")]
    ScaleOrder { eps: f64, eta: f64 },

    #[error("norm conditions violated: {0}")]
    NormConditionsViolated(String),

    #[error("trajectory does not cover the window [{start}, {end}]")]
    WindowMissing { start: f64, end: f64 },

    #[error("covering precondition violated: {0}")]
    ConditionViolated(String),

    #[error("kernel exponent alpha = {0} is not integrable in one dimension")]
    NonIntegrableKernel(f64),

    #[error("oracle density reached the grid buffer at t = {time} (mass fraction {fraction:e})")]
    SupportOverflow { time: f64, fraction: f64 },

    #[error("particle time {time} is outside the oracle time range [{start}, {end}]")]
    MisalignedTimes { time: f64, start: f64, end: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

fn time_suffix(time: &Option<f64>) -> String {
    match time {
        Some(t) => format!(" at t = {t}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Attach a simulation time to a collision error.
    pub fn at_time(self, t: f64) -> Self {
        match self {
            Error::Collision { i, j, distance, .. } => Error::Collision {
                i,
                j,
                distance,
                time: Some(t),
            },
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
