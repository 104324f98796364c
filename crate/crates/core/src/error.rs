use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-terminating cycle: more than {0} customers")]
    NonTerminatingCycle(u64),
    #[error("supremum diverges: {0}")]
    Divergent(String),
    #[error("method unavailable: {0}")]
    Unsupported(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("no root: {0}")]
    NoRoot(String),
    #[error("effective sample size {ess:.1} below floor {floor:.1}")]
    LowEss { ess: f64, floor: f64 },
    #[error("heavy-tailed cycle length: coefficient of variation {0:.1}")]
    HeavyTail(f64),
    #[error("tilted weights carry mass {mass:.4}, not 1: lambda is not a root")]
    NotNormalized { mass: f64 },
    #[error("{negative} negative F estimates carry {share:.3} of the weight; raise the inner sample size")]
    SignIndefinite { negative: usize, share: f64 },
}

impl Error {
    /// Guard refusals are deliberate stops, as opposed to bad input.
    pub fn is_guard(&self) -> bool {
        matches!(
            self,
            Error::NoRoot(_) | Error::LowEss { .. } | Error::HeavyTail(_) | Error::Divergent(_) | Error::NotNormalized { .. } | Error::SignIndefinite { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidParameter(msg()))
    }
}
