use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Stable identifier of a trace within a sketch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct TraceId(pub u64);

impl fmt::Display for TraceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller violated an operation's preconditions (shapes, ids, sizes).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error at `{path}`: {detail}")]
    Schema { path: String, detail: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("render error in trace {trace}: {detail}")]
    Render { trace: TraceId, detail: String },

    #[error("non-finite gradient in trace {trace}")]
    NonFiniteGradient { trace: TraceId },

    #[error("unsupported SVG feature at {locator}: {feature}")]
    Unsupported { locator: String, feature: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("backend transport error: {0}")]
    Transport(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
