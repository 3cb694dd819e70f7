//! Error type shared across the crate.

use std::fmt;

/// Everything that can go wrong while building grids, inverting moment
/// relations, or running the solver. Numerical monitors (entropy, positivity)
/// are reported through run reports, not through this type; `Error` is for
/// conditions that make a requested computation meaningless.
#[derive(Debug)]
pub enum Error {
    /// A field of the grid or run configuration is out of its admissible range.
    Spec {
        field: &'static str,
        message: String,
    },
    /// The configured cutoffs leave a tail above the requested tolerance.
    TailBound {
        which: &'static str,
        value: f64,
        tol: f64,
    },
    /// A scalar argument is outside the domain of the function.
    Domain {
        what: &'static str,
        value: f64,
    },
    /// Non-finite values were fed to a quadrature or produced by a solve.
    NonFinite {
        context: &'static str,
    },
    /// The target of the temperature inversion lies outside the bracket.
    EtaOutOfBracket {
        eta: f64,
        lo: f64,
        hi: f64,
    },
    /// First moments are not timelike, so no rest frame exists.
    DegenerateMoments {
        v0: f64,
        v_norm: f64,
    },
    /// A perturbation left the region where the macroscopic change of
    /// variables is invertible.
    SmallData {
        what: &'static str,
        value: f64,
    },
    /// An iterative solve stopped making progress.
    SolveStalled {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },
    /// Command line or config file problem.
    Config {
        message: String,
    },
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Spec { field, message } => write!(f, "invalid spec: {field}: {message}"),
            Error::TailBound { which, value, tol } => write!(
                f,
                "truncation tail {which} = {value:.3e} exceeds tolerance {tol:.3e}; \
                 raise the cutoff or loosen tail_tol"
            ),
            Error::Domain { what, value } => write!(f, "{what} = {value} is out of domain"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::EtaOutOfBracket { eta, lo, hi } => write!(
                f,
                "eta = {eta:.12e} not attained on gamma bracket [{lo:.3e}, {hi:.3e}]"
            ),
            Error::DegenerateMoments { v0, v_norm } => write!(
                f,
                "first moments are not timelike (V0 = {v0:.6e}, |V| = {v_norm:.6e})"
            ),
            Error::SmallData { what, value } => write!(
                f,
                "{what} = {value:.6e} is outside the small-perturbation regime"
            ),
            Error::SolveStalled {
                what,
                iterations,
                residual,
            } => write!(
                f,
                "{what} stalled after {iterations} iterations (residual {residual:.3e})"
            ),
            Error::Config { message } => write!(f, "config: {message}"),
            Error::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
