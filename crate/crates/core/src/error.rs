use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("input contains non-finite values")]
    NonFinite,

    /// The requested error bound cannot be met by the current model structure.
    #[error("infeasible bound: {context} (minimum residual {min_residual:.6e} > bound {bound:.6e})")]
    Infeasible {
        context: String,
        min_residual: f64,
        bound: f64,
    },

    #[error("root finding did not converge after {iters} iterations (bracket [{lo:.6e}, {hi:.6e}])")]
    NoConvergence { iters: usize, lo: f64, hi: f64 },

    #[error("evaluator failed: {0}")]
    Evaluator(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
