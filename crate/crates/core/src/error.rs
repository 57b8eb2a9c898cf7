//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors produced by tensor math, model I/O, clustering, pruning and deployment.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: String, detail: String },

    /// An index (channel, filter, class) is out of range or duplicated.
    #[error("invalid index in {context}: {detail}")]
    Index { context: String, detail: String },

    /// A caller-supplied argument violates its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Filesystem failure, with the offending path.
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Manifest or report JSON could not be parsed or written.
    #[error("JSON error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// Manifest format version is not understood by this build.
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    /// A layer's blob range runs past the end of the blob file.
    #[error("truncated blob: layer `{layer}` needs bytes {offset}..{end} but blob has {blob_len}")]
    TruncatedBlob {
        layer: String,
        offset: u64,
        end: u64,
        blob_len: u64,
    },

    /// Two layers claim overlapping byte ranges of the blob.
    #[error("overlapping blob ranges between layers `{first}` and `{second}`")]
    OverlappingBlob { first: String, second: String },

    /// Structurally invalid file content that is not covered above.
    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    /// A mask does not respect group-channel granularity for its grouping.
    #[error("layer `{layer}` violates group-channel granularity: {detail}")]
    Granularity { layer: String, detail: String },

    /// A compressible layer with pruned connections has no grouping to deploy from.
    #[error("layer `{0}` is pruned but carries no grouping")]
    MissingGrouping(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f32 },

    /// Deployed model disagrees with its masked dense source.
    #[error("equivalence check failed on layer `{layer}`: max |deviation| = {max_deviation:e} > {tolerance:e}")]
    Equivalence {
        layer: String,
        max_deviation: f32,
        tolerance: f32,
    },

    /// Operation not available for this layer kind.
    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn index(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Index {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
