use thiserror::Error;

/// Errors produced across the crate. Shape problems always name the offending
/// operation and dimension so failures are actionable from the message alone.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("timestep k={k} out of range [{min}, {max}]")]
    KOutOfRange { k: u32, min: u32, max: u32 },

    #[error("missing weight tensor `{0}`")]
    MissingWeight(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("model file has wrong magic bytes")]
    BadMagic,

    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),

    #[error("model file truncated: {0}")]
    Truncated(String),

    #[error("model payload checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("scene generation failed: {0}")]
    SceneGen(String),

    #[error("jitter trace too short: trace has {have} delays, sequence needs {need}")]
    TraceTooShort { have: usize, need: usize },

    #[error("image too small: min side {min_side} supports no {scales}-scale evaluation")]
    ImageTooSmall { min_side: usize, scales: usize },

    #[error("{0}")]
    Cli(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI's single-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Config(_) => "config",
            Error::KOutOfRange { .. } => "k_out_of_range",
            Error::MissingWeight(_) => "missing_weight",
            Error::NonFinite(_) => "non_finite",
            Error::BadMagic => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Truncated(_) => "truncated",
            Error::ChecksumMismatch { .. } => "checksum_mismatch",
            Error::SceneGen(_) => "scene_gen",
            Error::TraceTooShort { .. } => "trace_too_short",
            Error::ImageTooSmall { .. } => "image_too_small",
            Error::Cli(_) => "cli",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
