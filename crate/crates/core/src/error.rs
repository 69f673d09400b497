use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate doc_id `{0}` in corpus")]
    DuplicateDocId(String),

    #[error("empty index: no document matched any query conjunction for outcome `{outcome_id}`")]
    EmptyIndex { outcome_id: String },

    #[error("format version mismatch: reader expects {expected}, file has {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("checksum failure: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("corrupt artifact: {0}")]
    Corrupt(String),

    #[error("MeSH dictionary is empty")]
    EmptyDictionary,

    #[error("excluded note `{note_id}`: no canonical section found")]
    ExcludedNote { note_id: String },

    #[error("invalid negation lexicon: {0}")]
    InvalidLexicon(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("class {class} has zero training examples; weight undefined")]
    EmptyClass { class: usize },

    #[error("AUROC undefined: labels contain a single class")]
    AurocUndefined,

    #[error("protocol error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Protocol { message: String, line: Option<usize> },

    #[error("pair scorer failed for batch {doc_ids:?}: {message}")]
    Scorer { doc_ids: Vec<String>, message: String },

    #[error("provider unavailable after {attempts} attempts: {message}")]
    ProviderUnavailable { attempts: u32, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("infeasible fixture spec: {0}")]
    Infeasible(String),

    #[error("missing artifact {path}: run the `{stage}` stage first")]
    MissingArtifact { path: String, stage: &'static str },

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DuplicateDocId(_) => "duplicate_doc_id",
            Error::EmptyIndex { .. } => "empty_index",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Checksum { .. } => "checksum",
            Error::BadMagic { .. } => "bad_magic",
            Error::Corrupt(_) => "corrupt",
            Error::EmptyDictionary => "empty_dictionary",
            Error::ExcludedNote { .. } => "excluded_note",
            Error::InvalidLexicon(_) => "invalid_lexicon",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::EmptyInput(_) => "empty_input",
            Error::EmptyClass { .. } => "empty_class",
            Error::AurocUndefined => "auroc_undefined",
            Error::Protocol { .. } => "protocol",
            Error::Scorer { .. } => "scorer",
            Error::ProviderUnavailable { .. } => "provider_unavailable",
            Error::Config(_) => "config",
            Error::Infeasible(_) => "infeasible",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::UnknownId(_) => "unknown_id",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn protocol(message: impl Into<String>, line: Option<usize>) -> Self {
        Error::Protocol { message: message.into(), line }
    }
}
