use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocab { id: usize, size: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("infeasible CTC alignment: {frames} frames < {labels} labels + {repeats} repeats")]
    Feasibility {
        frames: usize,
        labels: usize,
        repeats: usize,
    },

    #[error("brute-force oracle too large: {0}")]
    OracleSize(String),

    #[error("parse error at record {record}: {msg}")]
    Parse { record: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("recipe: {0}")]
    Recipe(String),

    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Attaches the offending path to an IO error.
pub trait PathContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> PathContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated payload while reading {0}")]
    Truncated(String),

    #[error("parameter `{name}` has shape {found:?}, config expects {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("malformed header: {0}")]
    Header(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
