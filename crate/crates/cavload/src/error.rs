//! Error types shared across the simulator.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} s outside schedule domain [{start}, {end}] s")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("field point lies on the coil wire (distance {dist} m)")]
    Singularity { dist: f64 },

    #[error("no field zero found near ({0}, {1}, {2}) m after {3} iterations")]
    NoZeroFound(f64, f64, f64, usize),

    #[error("degenerate coil configuration: field Jacobian is singular")]
    DegenerateConfiguration,

    #[error("{0}")]
    Domain(String),

    #[error("transition probability {p} >= 1; reduce the timestep")]
    TimestepTooLarge { p: f64 },

    #[error("thermal sampling failed: acceptance rate {rate:.2e} below 1e-4 (potential too flat or unbounded)")]
    SamplingFailure { rate: f64 },

    #[error("non-finite force on atom {id} at t = {t} s")]
    NumericalBlowup { id: u64, t: f64 },

    #[error("exponential fit initialization requires positive ordinates (n[{index}] = {value})")]
    FitInitialization { index: usize, value: f64 },

    #[error("degenerate fit data: {0}")]
    DegenerateData(String),

    #[error("nonphysical data: {0}")]
    Nonphysical(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("simulation error at t = {t} s: {source}")]
    Simulation {
        t: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn at_time(self, t: f64) -> Error {
        Error::Simulation {
            t,
            source: Box::new(self),
        }
    }

    /// Process exit code per the CLI contract: 2 for configuration/input
    /// problems, 3 for simulation failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) => 2,
            _ => 3,
        }
    }
}
