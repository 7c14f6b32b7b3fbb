use alloc::string::String;

/// Errors raised by the core numerics.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An argument fell outside the domain of a function.
    #[error("{what} out of domain: {value}")]
    Domain {
        /// Name of the offending quantity.
        what: &'static str,
        /// The rejected value.
        value: f64,
    },
    /// A configuration value violated its invariant.
    #[error("invalid configuration `{field}`: {reason}")]
    Config {
        /// Dotted field name.
        field: &'static str,
        /// Human-readable reason.
        reason: String,
    },
    /// A loss or gradient became non-finite during an update.
    #[error("non-finite {0} encountered")]
    NonFinite(&'static str),
}

/// Result alias for the core crate.
pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn domain(what: &'static str, value: f64) -> Self {
        Error::Domain { what, value }
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }
}
