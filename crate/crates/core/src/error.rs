use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Which part of the model produced a numeric failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Image,
    Fourier,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Image => "image-stage",
            Stage::Fourier => "fourier-stage",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch on axis `{axis}`: expected {expected}, found {found}")]
    Dimension {
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {stage} at NCA step {step}")]
    NumericFailure { stage: Stage, step: usize },

    #[error("non-finite training loss at step {step} (timesteps {timesteps:?})")]
    NonFiniteLoss { step: u64, timesteps: Vec<usize> },

    #[error("diffusion timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("sample mask has no active cells")]
    EmptyMask,

    #[error("window {what}: {detail}")]
    Window { what: &'static str, detail: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("request needs {requested} bytes, budget is {budget} bytes")]
    OutOfMemory { requested: usize, budget: usize },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
