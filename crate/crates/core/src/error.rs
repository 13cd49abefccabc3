use std::path::PathBuf;

use thiserror::Error;

/// Every failure the engine can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point has non-positive depth z = {0:e}")]
    NonPositiveDepth(f64),
    #[error("scale factor must be strictly positive, got {0}")]
    NonPositiveScale(f64),
    #[error("rotation angle {0} rad is too close to pi for a stable logarithm")]
    NearPiRotation(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("no pointmap estimates supplied")]
    EmptyEstimates,
    #[error("grid dimensions disagree: {0}")]
    DimensionMismatch(String),
    #[error("invalid pointmap: {0}")]
    InvalidPointmap(String),
    #[error("match between views {view_a} and {view_b} references an invalid pixel ({u:.3}, {v:.3})")]
    InvalidMatchedPixel {
        view_a: usize,
        view_b: usize,
        u: f64,
        v: f64,
    },

    #[error("co-visibility graph is disconnected")]
    GraphDisconnected,
    #[error("unknown view id {0}")]
    UnknownView(usize),
    #[error("invalid co-visibility matrix: {0}")]
    InvalidScores(String),

    #[error("camera {camera} has {found} robot poses with images, need at least 2")]
    InsufficientPoses { camera: usize, found: usize },
    #[error("pose index mismatch: {0}")]
    PoseIndexMismatch(String),
    #[error("degenerate motion: {0}")]
    DegenerateMotion(String),
    #[error("camera translations vanish, metric scale is unobservable")]
    ZeroCameraTranslation,
    #[error("loss became non-finite at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("need at least 3 non-collinear points, got {0}")]
    InsufficientPoints(usize),
    #[error("plane consensus too weak: inlier ratio {ratio:.3} < {required:.3}")]
    NoConsensus { ratio: f64, required: f64 },
    #[error("empty input")]
    EmptyInput,

    #[error("length mismatch: {0} estimated vs {1} reference")]
    LengthMismatch(usize, usize),
    #[error("no checkerboard detections")]
    NoDetections,
    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("invalid scenario configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),

    #[error("missing channel: {0}")]
    MissingChannel(String),
    #[error("corrupt binary channel {path}: {reason}")]
    CorruptBinary { path: PathBuf, reason: String },
    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("pose on line {line} is not a rigid rotation: {reason}")]
    NonRigidRotation { line: usize, reason: String },
    #[error("first trajectory pose is not the identity (deviation {0:e})")]
    FirstPoseNotIdentity(f64),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Errors caused by a numerical breakdown rather than by bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss(_)
                | Error::DegenerateMotion(_)
                | Error::ZeroCameraTranslation
                | Error::NearPiRotation(_)
                | Error::NoConsensus { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
