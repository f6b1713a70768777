use thiserror::Error;

/// Errors produced anywhere in the CQD pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Malformed arguments: bad mode index, shape mismatch, out-of-range rank.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// QR retraction hit a (numerically) zero pivot.
    #[error("singular input: |R[{index},{index}]| = {value:e} below pivot tolerance")]
    Singular { index: usize, value: f64 },

    /// Fixed-rank retraction collapsed below the target multilinear rank.
    #[error("rank deficiency in mode {mode}: sigma_{rank} = {value:e}")]
    RankDeficient {
        mode: usize,
        rank: usize,
        value: f64,
    },

    /// A field does not fit the wire format.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Truncated or inconsistently sized query bytes.
    #[error("framing error: {0}")]
    Framing(String),

    /// CRC32 mismatch.
    #[error("integrity error: checksum {found:#010x} != expected {expected:#010x}")]
    Integrity { expected: u32, found: u32 },

    /// Unknown wire-format version byte.
    #[error("unsupported query version {0}")]
    Version(u8),

    /// The oracle could not interpret the query.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
