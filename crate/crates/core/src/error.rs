use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid fixed-point format: {0}")]
    Format(String),

    #[error("raw value {raw} outside the {bits}-bit range")]
    RawOutOfRange { raw: i64, bits: u8 },

    #[error("coordinate ({x}, {y}) outside {width}x{height} feature map")]
    OutOfBounds { x: usize, y: usize, width: usize, height: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unsupported by the accelerator: {0}")]
    Constraint(String),

    #[error("32-bit accumulator overflow ({0}); the layer's fixed-point formats are too wide")]
    AccumulatorOverflow(i64),

    #[error("topology error at layer {layer}: {msg}")]
    Topology { layer: usize, msg: String },

    #[error("weights: {0}")]
    Weights(String),

    #[error("calibration: {0}")]
    Calibration(String),

    #[error(transparent)]
    WeightFile(#[from] WeightFileError),

    #[error(transparent)]
    Ppm(#[from] PpmError),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Failures reading or writing an `SQNW` weight container.
#[derive(Debug, Error)]
pub enum WeightFileError {
    #[error("bad magic {0:?}, expected \"SQNW\"")]
    BadMagic([u8; 4]),

    #[error("unsupported weight file version {0}")]
    VersionMismatch(u16),

    #[error("truncated weight file while reading {0}")]
    Truncated(&'static str),

    #[error("shape mismatch in layer {layer}: {msg}")]
    ShapeMismatch { layer: String, msg: String },

    #[error("malformed weight file: {0}")]
    Malformed(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PpmError {
    #[error("not a binary PPM (P6) file")]
    NotP6,

    #[error("unsupported maxval {0}, only 255 is accepted")]
    MaxVal(u32),

    #[error("malformed PPM header")]
    Header,

    #[error("truncated raster: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
}
