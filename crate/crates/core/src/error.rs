use std::path::PathBuf;

/// Unified error type for the codec library.
///
/// Variants are grouped by how a caller should react: `InvalidInput` and
/// `Resolution` mean the request itself was bad, `Io`/`Image`/`Unavailable`
/// mean the environment failed, and `Corrupt`/`Verification`/`ModelMismatch`
/// mean data integrity checks failed. The CLI maps these groups onto
/// distinct process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("corrupt stream: {0}")]
    Corrupt(String),

    #[error("verification failure: {0}")]
    Verification(String),

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("training diverged at step {step} in stage {stage}; checkpoint written to {checkpoint}")]
    Diverged {
        step: usize,
        stage: String,
        checkpoint: PathBuf,
    },

    #[error("unavailable: {0}")]
    Unavailable(String),
}

impl Error {
    /// Process exit code the CLI should report for this error:
    /// 2 for bad arguments or rejected inputs, 3 for I/O and environment
    /// failures, 4 for integrity/verification failures, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::InvalidInput(_) | Error::Resolution(_) | Error::ShapeMismatch(_) => 2,
            Error::Io(_) | Error::Image(_) | Error::Unavailable(_) => 3,
            Error::Corrupt(_) | Error::Verification(_) | Error::ModelMismatch(_) => 4,
            Error::Diverged { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
