use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A reduction window does not fit its (padded) input.
    #[error("{dim}: window {window} exceeds padded input {input}")]
    Window { dim: &'static str, window: usize, input: usize },

    #[error("invalid layer parameters: {0}")]
    Params(String),

    /// A buffer, config or operand does not match what the layer expects.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("layer {index} ({kind}): {source}")]
    Layer {
        index: usize,
        kind: String,
        #[source]
        source: Box<Error>,
    },

    #[error("model has no layers")]
    EmptyModel,

    #[error("weight payload length mismatch: expected {expected} values, found {actual}")]
    WeightLength { expected: usize, actual: usize },

    /// `F_H * F_W * F_C * 255 * 255` does not fit an `i32` accumulator.
    #[error("int32 accumulator may overflow: window of {window} elements (limit {limit})")]
    AccumulatorOverflow { window: usize, limit: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_layer(self, index: usize, kind: impl Into<String>) -> Self {
        Error::Layer { index, kind: kind.into(), source: Box::new(self) }
    }
}
