use thiserror::Error;

/// Errors produced by the lanefuse library.
#[derive(Debug, Error)]
pub enum Error {
    /// A spline parameter was outside its valid domain.
    #[error("parameter u = {0} outside [0, 1]")]
    ParameterOutOfRange(f64),

    /// A segment index was outside `1..=v-2`.
    #[error("segment index {index} out of range for trajectory with {control_points} control points")]
    SegmentOutOfRange { index: usize, control_points: usize },

    /// A B-spline trajectory needs at least three control points.
    #[error("a quadratic B-spline trajectory needs at least 3 control points, got {0}")]
    TooFewControlPoints(usize),

    /// Implicit-element estimation needs at least two observations.
    #[error("implicit element needs at least 2 observations, got {0}")]
    InsufficientObservations(usize),

    /// A factor referenced a pose or landmark that is not in the graph state.
    #[error("factor endpoint not present in graph state: {0}")]
    MissingEndpoint(String),

    /// ICP registration did not produce a usable relative pose.
    #[error("registration rejected: {0}")]
    RegistrationRejected(String),

    /// The pose-graph optimizer could not make progress.
    #[error("optimization failed: {0}")]
    OptimizationFailed(String),

    /// A scenario or drive description was invalid.
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    /// Evaluation was asked to compare against an empty reference.
    #[error("empty ground truth")]
    EmptyGroundTruth,

    /// Serialization / file-format problems.
    #[error("map file error: {0}")]
    MapFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
