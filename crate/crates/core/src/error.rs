use thiserror::Error;

/// Crate-wide error type.
///
/// Variants split into validation failures (bad configs, shape mismatches,
/// missing files — CLI exit code 1) and numerical failures (blow-ups,
/// singular factorizations, saturated sampling — CLI exit code 2).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed data file {path}: {reason}")]
    Parse { path: String, reason: String },

    #[error("non-finite state encountered{}", context_suffix(.0))]
    NonFiniteState(String),

    #[error("{discarded} of {total} trajectories blew up (limit {limit_percent}%)")]
    TooManyBlowups {
        discarded: usize,
        total: usize,
        limit_percent: f64,
    },

    #[error("non-finite prediction from surrogate propagation")]
    NonFinitePrediction,

    #[error("covariance not factorizable even after jitter (trace {trace:.3e})")]
    SingularCovariance { trace: f64 },

    #[error("diffusion vanishes inside the escape interval at x = {location}")]
    SingularDiffusion { location: f64 },

    #[error("no addable node near any residual peak; widen the radius or stop")]
    SaturatedRegion,

    #[error("{censored} of {total} escape trajectories exceeded max_time; increase max_time")]
    IncreaseMaxTime { censored: usize, total: usize },

    #[error("training diverged: {0}")]
    Divergence(String),
}

fn context_suffix(ctx: &str) -> String {
    if ctx.is_empty() {
        String::new()
    } else {
        format!(" ({ctx})")
    }
}

impl Error {
    /// Exit code contract: 1 for validation problems, 2 for numerical ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Io(_) | Error::Json(_) | Error::Parse { .. } => 1,
            _ => 2,
        }
    }
}
