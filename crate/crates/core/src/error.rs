use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid direction: norm {norm} is not 1")]
    InvalidDirection { norm: f64 },
    #[error("empty direction scheme")]
    EmptyScheme,
    #[error("cannot select {requested} directions from a shell of {available}")]
    SelectionSize { requested: usize, available: usize },
    #[error("need at least {needed} inputs, got {got}")]
    InsufficientInput { needed: usize, got: usize },
    #[error("unsupported SH order {0}: order must be even")]
    UnsupportedOrder(usize),
    #[error(
        "SH fit is rank deficient ({n_dirs} directions for {n_coeffs} coefficients); \
         use a regularization weight lambda > 0"
    )]
    RankDeficient { n_dirs: usize, n_coeffs: usize },
    #[error("invalid signal: {0}")]
    InvalidSignal(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("quadrature grid has {0} points, at least 100 are required")]
    InsufficientQuadrature(usize),
    #[error("malformed gradient table: {0}")]
    MalformedTable(String),
    #[error("channel {channel} with b={bvalue} belongs to no shell")]
    UngroupedChannel { channel: usize, bvalue: f64 },
    #[error("volume has no b0 channels to normalize by")]
    MissingB0,
    #[error("patch width {w} exceeds volume dimension {dim}")]
    PatchTooLarge { w: usize, dim: usize },
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("unsupported format: {0}")]
    Version(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("sampling policy mismatch: {0}")]
    PolicyMismatch(String),
    #[error("volume must be b0-normalized before prediction")]
    NormalizationRequired,
    #[error("evaluation mask is empty")]
    EmptyEvaluation,
    #[error("volume {dims:?} is smaller than the {window}^3 SSIM window")]
    Window { dims: [usize; 3], window: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
