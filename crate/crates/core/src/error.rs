use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// Each variant names the operation that raised it so that the CLI can
/// report the origin without extra bookkeeping.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: invalid parameter `{field}`: {reason}")]
    InvalidParameter {
        op: &'static str,
        field: &'static str,
        reason: String,
    },

    #[error("{op}: quadrature did not converge ({reason})")]
    QuadratureNonConvergence { op: &'static str, reason: String },

    #[error("{op}: non-finite value ({reason})")]
    NonFinite { op: &'static str, reason: String },

    #[error("{op}: price {price:e} is below the floor {floor:e}; instrument cannot complete the market")]
    DegeneratePrice {
        op: &'static str,
        price: f64,
        floor: f64,
    },

    #[error("{op}: instrument `{instrument}` has variance sensitivity {vega:e}; it cannot span volatility risk")]
    Uncompletable {
        op: &'static str,
        instrument: String,
        vega: f64,
    },

    #[error("{op}: composition [{instruments}] is incomplete (smallest singular value {sigma_min:e})")]
    IncompleteMarket {
        op: &'static str,
        instruments: String,
        sigma_min: f64,
    },

    #[error("{op}: pair ({first}, {second}) is ill-conditioned (condition number {cond:e})")]
    IllConditioned {
        op: &'static str,
        first: String,
        second: String,
        cond: f64,
    },

    #[error("{op}: non-positive wealth {wealth:e} in inner simulation")]
    Bankruptcy { op: &'static str, wealth: f64 },

    #[error("{op}: linear program infeasible ({reason})")]
    Infeasible { op: &'static str, reason: String },

    #[error("{op}: Riccati solution blew up at tau = {tau}")]
    RiccatiBlowUp { op: &'static str, tau: f64 },

    #[error("{op}: {reason}")]
    Numerical { op: &'static str, reason: String },

    #[error("step {step} (t = {t}): {source}")]
    AtStep {
        step: usize,
        t: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("path {path}, step {step}: {source}")]
    AtNode {
        path: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            op,
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn numerical(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Numerical {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn at_step(self, step: usize, t: f64) -> Self {
        Error::AtStep {
            step,
            t,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_node(self, path: usize, step: usize) -> Self {
        Error::AtNode {
            path,
            step,
            source: Box::new(self),
        }
    }

    /// True when the root cause is a rejected input rather than a numerical failure.
    pub fn is_invalid_input(&self) -> bool {
        match self {
            Error::InvalidParameter { .. } => true,
            Error::AtStep { source, .. } | Error::AtNode { source, .. } => source.is_invalid_input(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
