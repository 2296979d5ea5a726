use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario at {location}: {msg}")]
    Invalid { location: String, msg: String },
    #[error("intersection {intersection}: {msg}")]
    Action { intersection: usize, msg: String },
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

pub(crate) fn invalid(location: impl Into<String>, msg: impl Into<String>) -> SimError {
    SimError::Invalid {
        location: location.into(),
        msg: msg.into(),
    }
}
