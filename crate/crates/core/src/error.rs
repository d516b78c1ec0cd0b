use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the engine can report.
///
/// Variants are grouped by the component that raises them; `Error::exit_code`
/// maps them onto the CLI's exit-code convention.
#[derive(Debug, Error)]
pub enum Error {
    // hierarchy
    #[error("hierarchy edge list is empty")]
    EmptyEdges,
    #[error("cycle detected: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("fine-grained class `{fg}` assigned to both `{first}` and `{second}`")]
    DuplicateFgAssignment {
        fg: String,
        first: String,
        second: String,
    },

    // tensor store
    #[error("bad magic bytes (expected \"VLEB\")")]
    BadMagic,
    #[error("unsupported matrix file version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u32),
    #[error("truncated matrix file: {0}")]
    TruncatedFile(String),
    #[error("matrix shape overflow: {0}")]
    ShapeOverflow(String),
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("key mismatch at index {index}: matrix has `{matrix}`, records have `{record}`")]
    KeyMismatch {
        index: usize,
        matrix: String,
        record: String,
    },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("box for `{label}` in image `{image}` lies outside the image")]
    BoxOutOfBounds { image: String, label: String },
    #[error("box label `{label}` in image `{image}` is not among the image labels")]
    LabelMissingForBox { image: String, label: String },

    // scoring
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("zero-norm row {row} in {side} matrix")]
    ZeroNormRow { side: &'static str, row: usize },
    #[error("embedding mean has zero norm for `{0}`")]
    ZeroNormMean(String),
    #[error("no embedding row for fine-grained class `{0}`")]
    MissingFgEmbedding(String),
    #[error("no embedding row for `{0}`")]
    MissingEmbedding(String),
    #[error("no score column for class `{0}`")]
    MissingClassColumn(String),
    #[error("invalid prompt template `{0}`: needs exactly one `{{}}` placeholder")]
    BadTemplate(String),

    // metrics
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("average precision undefined: no positives")]
    NoPositives,
    #[error("constant input: rank correlation undefined")]
    DegenerateConstantInput,
    #[error("need at least {needed} paired values, got {got}")]
    TooFewValues { needed: usize, got: usize },
    #[error("no boxes for label `{label}` in image `{image}`")]
    MissingBoxes { image: String, label: String },

    // retrieval bench
    #[error("image `{0}` has no captions")]
    NoCaptions(String),
    #[error("image `{0}` has no labels")]
    NoLabels(String),
    #[error("no replaceable entity span in caption `{0}`")]
    NoReplaceableSpan(String),
    #[error("no replacement label available outside the image labels")]
    EmptyReplacementPool,

    // frequency analysis
    #[error("lexicon is empty")]
    EmptyLexicon,
    #[error("no retrieved-image count for leaf `{0}`")]
    MissingLeafCount(String),
    #[error("shard `{path}` declares {declared} captions but holds {actual}")]
    ShardCountMismatch {
        path: String,
        declared: u64,
        actual: u64,
    },

    // synthetic worlds
    #[error("embedding dimension {dim} too small, need at least {needed}")]
    DimTooSmall { dim: usize, needed: usize },
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),

    // generic input handling
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl AsRef<str>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().to_string(),
            line,
            msg: msg.into(),
        }
    }

    /// 1 usage error, 2 data error, 3 internal invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Internal(_) => 3,
            _ => 2,
        }
    }
}
