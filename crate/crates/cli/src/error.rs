use deal_core::DealError;
use deal_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] DealError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Core(e) => match e {
                DealError::Config(_)
                | DealError::Text(_)
                | DealError::ConceptParse { .. }
                | DealError::ConceptValidation { .. }
                | DealError::UnknownCategory(_) => 2,
                DealError::Io { .. } | DealError::Dataset(_) | DealError::Checksum { .. } | DealError::Checkpoint(_) => 3,
                DealError::NonFinite { .. } => 4,
                DealError::Tensor(t) => match t {
                    TensorError::Io { .. } | TensorError::Snapshot(_) => 3,
                    TensorError::Domain { .. } => 4,
                    _ => 2,
                },
            },
        }
    }
}

pub fn io_error(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}
