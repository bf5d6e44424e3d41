//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Result`]. Faults that a
//! caller may want to distinguish programmatically (corrupt weight files,
//! shape mismatches, misuse of batch-norm modes, ...) get their own variant
//! instead of being collapsed into a stringly-typed catch-all.

use crate::tensor::Dims;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor was constructed from a buffer whose length does not match
    /// the product of the requested dimensions.
    #[error("buffer of length {len} cannot be viewed as dims {dims:?}")]
    BufferLen { len: usize, dims: Dims },

    /// Two tensors that must agree in shape do not.
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Dims,
        got: Dims,
    },

    /// A per-channel parameter vector does not match the tensor's channel
    /// count.
    #[error("channel mismatch in {op}: tensor has {tensor} channels, parameters have {params}")]
    ChannelMismatch {
        op: &'static str,
        tensor: usize,
        params: usize,
    },

    /// An argument violated a documented precondition.
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// A convolution was built with an unsupported kernel size.
    #[error("unsupported kernel size {k}: only 1x1 and 3x3 kernels are implemented")]
    UnsupportedKernel { k: usize },

    /// Batch normalization in `Batch` mode saw a reduction set of a single
    /// element, for which the batch variance is identically zero and the
    /// statistics are meaningless.
    #[error("batch norm in Batch mode needs n*h*w > 1 per channel, got {count}")]
    DegenerateBatch { count: usize },

    /// An operation required a specific batch-norm mode and found another.
    #[error("batch norm mode error in {op}: {msg}")]
    BnMode { op: &'static str, msg: String },

    /// A structural expectation about a model was violated (wrong form,
    /// wrong layer count, ...).
    #[error("model structure error in {op}: {msg}")]
    ModelStructure { op: &'static str, msg: String },

    /// The model contains no batch-norm layers to report on.
    #[error("model has no batch-norm layers (already collapsed to plain form?)")]
    NoBnLayers,

    /// A rectangle or coordinate lies outside the tensor it addresses.
    #[error("region out of bounds in {op}: {msg}")]
    OutOfBounds { op: &'static str, msg: String },

    /// An image is too small for the requested operation (patch sampling,
    /// downscaling, ...).
    #[error("image too small for {op}: {msg}")]
    ImageTooSmall { op: &'static str, msg: String },

    /// A training configuration failed validation.
    #[error("invalid training config: {msg}")]
    InvalidConfig { msg: String },

    /// Weight file: the leading magic bytes are not `RPSR`.
    #[error("not a weight file: bad magic {found:?}")]
    BadMagic { found: [u8; 4] },

    /// Weight file: the format version is one this build cannot read.
    #[error("unsupported weight format version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    /// Weight file: the payload ended in the middle of a tensor record.
    #[error("weight payload truncated while reading tensor `{tensor}`")]
    TruncatedPayload { tensor: String },

    /// Weight file: a stored tensor's dimensions disagree with the model
    /// spec in the header.
    #[error("stored tensor `{tensor}` has dims {got:?}, spec requires {expected:?}")]
    TensorDimMismatch {
        tensor: String,
        expected: Dims,
        got: Dims,
    },

    /// Weight file: a tensor required by the spec is absent.
    #[error("weight payload is missing tensor `{tensor}`")]
    MissingTensor { tensor: String },

    /// Weight file: the payload contains a tensor the spec does not define.
    #[error("weight payload contains unexpected tensor `{tensor}`")]
    UnexpectedTensor { tensor: String },

    /// Weight file: the stored scalar type disagrees with the requested one.
    #[error("precision mismatch: file stores {stored}, caller requested {requested}")]
    PrecisionMismatch {
        stored: &'static str,
        requested: &'static str,
    },

    /// Weight file: the JSON header failed to parse.
    #[error("weight header is not valid JSON: {0}")]
    HeaderJson(#[from] serde_json::Error),

    /// Any underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// PNG decode/encode failure.
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Shorthand for [`Error::InvalidArgument`].
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
