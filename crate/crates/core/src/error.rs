use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid media shape {frames}x{height}x{width}: every dimension must be >= 1")]
    InvalidShape {
        frames: u32,
        height: u32,
        width: u32,
    },
    #[error("invalid latent geometry: downsampling factors must be >= 1")]
    InvalidGeometry,
    #[error("frames - 1 = {frames_minus_one} is not divisible by the temporal factor {factor}")]
    NonDivisibleFrames { frames_minus_one: u32, factor: u32 },
    #[error("{axis} {value} is not divisible by the spatial factor {factor}")]
    NonDivisibleSpatial {
        axis: &'static str,
        value: u32,
        factor: u32,
    },
    #[error("duplicate shape {frames}x{height}x{width} in catalog")]
    DuplicateShape {
        frames: u32,
        height: u32,
        width: u32,
    },
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("sequence length must be >= 1")]
    ZeroSequence,
    #[error("invalid constraint: {0}")]
    InvalidConstraint(&'static str),
    #[error("arithmetic overflow computing {0}")]
    Overflow(&'static str),
    #[error("invalid sweep configuration: {0}")]
    InvalidSweep(&'static str),
    #[error("insufficient data: {0}")]
    InsufficientData(&'static str),
    #[error("degenerate fit: observed step times have zero variance")]
    DegenerateFit,
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("target step time {target} is not above the fixed overhead {overhead}")]
    TargetBelowOverhead { target: f64, overhead: f64 },
    #[error("cost model slope {0} is not positive")]
    ZeroSlope(f64),
    #[error("empty step records")]
    EmptyRecords,
    #[error("plan does not match catalog: {0}")]
    PlanMismatch(&'static str),
    #[error("invalid weights: {0}")]
    InvalidWeights(&'static str),
    #[error("invalid cluster configuration: {0}")]
    InvalidCluster(&'static str),
    #[error("empty input")]
    Empty,
    #[error("all values are zero")]
    AllZero,
    #[error("mean is zero")]
    ZeroMean,
    #[error("negative or non-finite value in {0}")]
    InvalidValue(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("cached statistics do not match the input")]
    StaleStats,
    #[error("invalid tile {d_tile}x{n_tile} for input {n}x{d}")]
    InvalidTile {
        d_tile: usize,
        n_tile: usize,
        n: usize,
        d: usize,
    },
}
