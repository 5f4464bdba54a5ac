use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("lattice depth {depth} E_R outside supported range [{min}, {max}] E_R")]
    DepthOutOfRange { depth: f64, min: f64, max: f64 },

    #[error("control value {value} outside bounds [{min}, {max}]")]
    ControlOutOfBounds { value: f64, min: f64, max: f64 },

    #[error("eigensolver failed to converge ({context})")]
    EigensolverFailure { context: String },

    #[error("Wannier phase fixing left residual imaginary part {residual:.3e} > 1e-6 at depth {depth} E_R")]
    WannierNotReal { depth: f64, residual: f64 },

    #[error("constitutive ratio U/J_x is not strictly monotone near v_x = {depth} E_R (band solver failure?)")]
    NonMonotoneRatio { depth: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("count overflow in {context}; use the formula-only path")]
    CountOverflow { context: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("gauge is at site {gauge} but the operation requires it at bond {bond}")]
    GaugeMismatch { gauge: usize, bond: usize },

    #[error("occupation {occupation} does not fit local dimension {local_dim}")]
    OccupationTooLarge { occupation: usize, local_dim: usize },

    #[error("dense representation of {dim} amplitudes exceeds the desk-scale guard ({guard})")]
    DenseTooLarge { dim: u128, guard: u128 },

    #[error("imaginary-time search did not converge within {sweeps} sweeps; energy trace: {trace:?}")]
    ImaginaryTimeNotConverged { sweeps: usize, trace: Vec<f64> },

    #[error("non-finite cost encountered{}", index.map(|i| format!(" while probing control index {i}")).unwrap_or_default())]
    NonFiniteCost { index: Option<usize> },

    #[error("fidelity {0} outside [0, 1] beyond roundoff; upstream state is corrupt")]
    FidelityOutOfRange(f64),

    #[error("zero reference variance at site {site}; initial state is degenerate for eta")]
    ZeroReferenceVariance { site: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown figure kind `{0}` (expected f_vs_t | controls | occupations | merit)")]
    UnknownFigureKind(String),

    #[error("snapshot format error: {0}")]
    SnapshotFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
