#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("no signal: correlation peak below threshold")]
    NoSignal,
    #[error("no packet: {0}")]
    NoPacket(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("estimation failed: {0}")]
    EstimationFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
