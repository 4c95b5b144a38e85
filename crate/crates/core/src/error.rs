use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cutoff {cutoff} too small for |alpha| = {magnitude}: truncated norm loss {loss:.3e}")]
    CutoffTooSmall { cutoff: usize, magnitude: f64, loss: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not Hermitian (max deviation {0:.3e})")]
    NotHermitian(f64),

    #[error("trace defect {0:.3e} exceeds tolerance; increase the moment order")]
    TraceDefect(f64),

    #[error("rank {rank} out of range for sector of size {size}")]
    RankOutOfRange { rank: usize, size: usize },

    #[error("output-photon sector {0} exceeds truncation")]
    SectorOverflow(usize),

    #[error("estimated memory {estimate} bytes exceeds budget {budget} bytes")]
    MemoryBudget { estimate: u64, budget: u64 },

    #[error("norm drift {drift:.3e} in a single step at t = {t:.4}")]
    NormDrift { drift: f64, t: f64 },

    #[error("no emitted photons; pulse envelope undefined")]
    NoEmission,

    #[error("least-squares fit is degenerate: {0}")]
    DegenerateFit(String),

    #[error("optimizer failure: {0}")]
    Optimizer(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
