use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("expected a {expected}-dimensional vector, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("prompt must not be empty")]
    EmptyPrompt,

    #[error("prompt is {len} tokens long but the context length is {max}")]
    PromptTooLong { len: usize, max: usize },

    #[error("expected a 3-channel image, got {0} channels")]
    Channels(usize),

    #[error("image of {height}x{width} is smaller than the minimum side {min}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("cosine similarity of a zero-norm vector")]
    ZeroNorm,

    #[error("degenerate direction: {0} has zero norm")]
    DegenerateDirection(&'static str),

    #[error("contrastive batch has no valid positive pairs: {0}")]
    NoPositives(String),

    #[error("feature pyramid is missing layer {0}")]
    MissingLayer(&'static str),

    #[error("loss term {0} is not finite")]
    NonFiniteLoss(&'static str),

    #[error("fusion order {order} exceeds the {available} parameter sets available")]
    FusionOrder { order: usize, available: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checkpoint config hash {found} does not match the current config hash {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error("frozen weights {component} changed: expected hash {expected}, found {found}")]
    FrozenWeights {
        component: &'static str,
        expected: String,
        found: String,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("invalid style prompt: {0}")]
    Prompt(String),

    #[error("classifier label set does not contain {0:?}")]
    LabelMismatch(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("{path}: {source}")]
    ImageFile {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Safetensors(#[from] safetensors::SafeTensorError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
