use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point has non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal with determinant +1 (deviation {0:e})")]
    InvalidPose(f64),
    #[error("invalid depth range: near={near}, far={far}")]
    InvalidRange { near: f64, far: f64 },
    #[error("at least two planes are required, got {0}")]
    TooFewPlanes(usize),
    #[error("{planes} planes cannot be split into {layers} equal groups")]
    IndivisibleGroups { planes: usize, layers: usize },
    #[error("layer index {index} outside 1..={layers}")]
    LayerIndexOutOfRange { index: usize, layers: usize },
    #[error("beta value {0} outside [0, 1]")]
    BetaOutOfRange(f64),
    #[error("alpha value {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("coloring output does not match scheme {scheme}: {detail}")]
    SchemeShapeMismatch { scheme: String, detail: String },
    #[error("degenerate camera: {0}")]
    DegenerateCamera(String),
    #[error("row {row} outside grid of height {height}")]
    RowOutOfRange { row: usize, height: usize },
    #[error("flow convention mismatch: {0}")]
    ConventionMismatch(String),
    #[error("ordering loss needs at least two layers")]
    SingleLayer,
    #[error("grid {height}x{width} too small, need at least 2x2")]
    DegenerateGrid { height: usize, width: usize },
    #[error("image {height}x{width} smaller than the {window}x{window} window")]
    ImageTooSmall { height: usize, width: usize, window: usize },
    #[error("crop margin {margin} too large for {height}x{width} image")]
    CropTooLarge { margin: usize, height: usize, width: usize },
    #[error("ground-truth depth {depth} outside [{near}, {far}]")]
    DepthOutOfRange { depth: f64, near: f64, far: f64 },
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
