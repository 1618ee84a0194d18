use std::path::PathBuf;

/// Failure classes map onto CLI exit codes: data problems, numeric
/// failures and configuration/usage problems are kept apart.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {stage}: {detail}")]
    Shape { stage: String, detail: String },
    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Grad(#[from] lnsynth_grad::Error),
}

impl Error {
    pub(crate) fn shape(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape { stage: stage.into(), detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Re-tags a shape error coming out of the autodiff engine with the
    /// network stage that produced it.
    pub(crate) fn at(stage: &str) -> impl Fn(lnsynth_grad::Error) -> Error + '_ {
        move |e| match e {
            lnsynth_grad::Error::Shape(d) => Error::shape(stage, d),
            other => Error::Grad(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
