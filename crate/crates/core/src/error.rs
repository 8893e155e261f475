use regionedit_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum EditError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("malformed {kind} file: {msg}")]
    Format { kind: &'static str, msg: String },
    #[error("checkpoint does not match the model:\n{0}")]
    CheckpointMismatch(String),
    #[error("loss became NaN at step {step}; first NaN tensor: {tensor}")]
    NanLoss { step: usize, tensor: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EditError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }
}

pub type Result<T, E = EditError> = std::result::Result<T, E>;
