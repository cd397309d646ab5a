use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("graph is not connected ({reached} of {total} vertices reachable from vertex 0)")]
    Disconnected { reached: usize, total: usize },

    #[error("capacity exceeded: {what} needs {requested}, cap is {cap}")]
    Capacity {
        what: &'static str,
        requested: usize,
        cap: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("spectral gap {gap:e} below threshold; generator looks disconnected")]
    SpectralGap { gap: f64 },

    #[error("local time overflow: T[{vertex}] = {value} exceeds bound {bound} (state: {state:?})")]
    Overflow {
        vertex: usize,
        value: f64,
        bound: f64,
        state: Vec<f64>,
    },

    #[error("quadrature failed to reach tolerance {tol:e} (estimate {value}, error {error:e})")]
    Quadrature { value: f64, error: f64, tol: f64 },

    #[error("root finding failed: {0}")]
    RootFinding(String),

    #[error("consistency residual {residual:e} exceeds {limit:e}")]
    Consistency { residual: f64, limit: f64 },

    #[error("evolved Q differs from the solved Q by {residual:e} (limit {limit:e}); reduce the ODE step")]
    OdeResidual { residual: f64, limit: f64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("statistics: {0}")]
    Statistics(String),

    #[error("unknown name: {0}")]
    Unknown(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
