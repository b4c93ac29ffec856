use std::path::PathBuf;

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {0} out of vocabulary")]
    UnknownId(u32),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{0}")]
    Invalid(String),
    #[error("episode of {len} tokens exceeds horizon {horizon}")]
    Horizon { len: usize, horizon: usize },
    #[error("state is terminal")]
    Terminal,
    #[error("sequence of {len} tokens exceeds block length {block}")]
    BlockOverflow { len: usize, block: usize },
    #[error("reward {0} outside [0, 1]")]
    RewardRange(f64),
    #[error("pair has no paraphrase class")]
    MissingClass,
    #[error("model has no {0} head")]
    MissingHead(&'static str),
    #[error("no records with return >= {threshold}; lower the threshold")]
    EmptyFilter { threshold: f64 },
    #[error("scorer batch {batch}: {msg}")]
    Scorer { batch: usize, msg: String },
    #[error("missing {what} ({path}); run {stage} first")]
    MissingArtifact { what: &'static str, path: PathBuf, stage: &'static str },
    #[error("provenance mismatch: {0}")]
    Provenance(String),
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    /// Process exit status for this error: 2 config, 3 missing artifact,
    /// 4 provenance mismatch, 5 locked output, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact { .. } => 3,
            Error::Provenance(_) => 4,
            Error::Locked(_) => 5,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}
