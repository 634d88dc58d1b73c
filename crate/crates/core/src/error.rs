use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Rescaling a schedule that already reaches zero terminal SNR.
    #[error("schedule is already zero-terminal-SNR; refusing to rescale twice")]
    AlreadyZtsnr,

    #[error("sigma {0} is not finite; use the infinite-noise denoiser instead")]
    NonFiniteSigma(f64),

    #[error("network output has {got} elements, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("no training target exists at sigma = 0")]
    ZeroSigma,

    #[error("sigmas must decrease: cannot step from {from} to {to}")]
    ScheduleOrder { from: f64, to: f64 },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("channel {0} has zero standard deviation")]
    DegenerateChannel(usize),

    #[error("manifest is empty")]
    EmptyManifest,

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
