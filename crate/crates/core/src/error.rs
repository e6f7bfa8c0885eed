use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("depth must be positive, got z = {0}")]
    DepthNotPositive(f64),

    #[error("pixel row v = {v} lies on the horizon (cy = {cy})")]
    HorizonSingularity { v: f64, cy: f64 },

    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("invalid ground plane height {0}")]
    InvalidGroundPlane(f64),

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("invalid kernel spec: {0}")]
    InvalidKernel(String),

    #[error("invalid module config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),

    #[error("calibration text has no P2 line")]
    MissingP2,

    #[error("malformed number in calibration: {0}")]
    MalformedNumber(String),

    #[error("non-positive focal length in P2 (fx = {fx}, fy = {fy})")]
    NonPositiveFocal { fx: f64, fy: f64 },

    #[error("bad magic {0:?}, expected \"PACT\"")]
    BadMagic([u8; 4]),

    #[error("unsupported PACT version {0}")]
    UnsupportedVersion(u8),

    #[error("unknown PACT dtype code {0}")]
    UnknownDtype(u8),

    #[error("truncated PACT payload: {0}")]
    TruncatedPayload(String),

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch { expected: &'static str, found: &'static str },

    #[error("malformed params manifest: {0}")]
    BadManifest(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
