use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can report.
///
/// Variants mirror the named error conditions of each stage so that reports
/// can carry a machine-readable `kind`.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate metric at {point:?}: smallest eigenvalue {min_eigenvalue:e}")]
    DegenerateMetric { point: Vec<f64>, min_eigenvalue: f64 },
    #[error("degenerate critical point at {point:?}: Hessian eigenvalue {eigenvalue:e}")]
    DegenerateCritical { point: Vec<f64>, eigenvalue: f64 },
    #[error("no admissible chart radius at critical point {id}")]
    ChartTooSmall { id: String },
    #[error("critical values {upper} and {lower} are too close to separate")]
    LadderCollision { upper: f64, lower: f64 },
    #[error("flow step size underflow at time {time} (point {point:?})")]
    StepUnderflow { time: f64, point: Vec<f64> },
    #[error("rescaled flow reached the critical level {level} at {point:?}")]
    HitCriticalLevel { level: f64, point: Vec<f64> },
    #[error("trajectory converges to critical point {id}, it lies on its stable manifold")]
    StuckOnStableManifold { id: String },
    #[error("critical point {id} has index zero, its unstable sphere is empty")]
    IndexZero { id: String },
    #[error("index difference of {from} -> {to} is {diff}, expected 1")]
    IndexMismatch { from: String, to: String, diff: i64 },
    #[error("non-transversal intersection suspected for {from} -> {to} at theta = {theta}")]
    NonTransversalSuspected { from: String, to: String, theta: f64 },
    #[error("landed point at theta = {theta} is captured by two stable spheres ({first}, {second})")]
    CaptureAmbiguous { theta: f64, first: String, second: String },
    #[error("transported frame is rank deficient (condition number {condition:e})")]
    SingularTransport { condition: f64 },
    #[error("incidence pair {from} -> {to} was never searched")]
    MissingPair { from: String, to: String },
    #[error("trajectory {from} -> {to} carries no deck element")]
    MissingDeck { from: String, to: String },
    #[error("form degree {degree} does not match unstable manifold dimension {index}")]
    NotTopDegree { degree: usize, index: usize },
    #[error("quadrature did not converge: {value} vs {refined} (estimate {estimate:e})")]
    NonConvergent { value: f64, refined: f64, estimate: f64 },
    #[error("cutoff amplitude {alpha} exceeds the admissible bound {delta}")]
    AlphaTooLarge { alpha: f64, delta: f64 },
    #[error("no regular value found after {trials} trials (best margin {best_margin:e})")]
    NoRegularValueFound { trials: usize, best_margin: f64 },
    #[error("perturbed inverse metric lost positive definiteness (min eigenvalue {min_eigenvalue:e})")]
    PositivityLost { min_eigenvalue: f64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::DegenerateMetric { .. } => "DegenerateMetric",
            Error::DegenerateCritical { .. } => "DegenerateCritical",
            Error::ChartTooSmall { .. } => "ChartTooSmall",
            Error::LadderCollision { .. } => "LadderCollision",
            Error::StepUnderflow { .. } => "StepUnderflow",
            Error::HitCriticalLevel { .. } => "HitCriticalLevel",
            Error::StuckOnStableManifold { .. } => "StuckOnStableManifold",
            Error::IndexZero { .. } => "IndexZero",
            Error::IndexMismatch { .. } => "IndexMismatch",
            Error::NonTransversalSuspected { .. } => "NonTransversalSuspected",
            Error::CaptureAmbiguous { .. } => "CaptureAmbiguous",
            Error::SingularTransport { .. } => "SingularTransport",
            Error::MissingPair { .. } => "MissingPair",
            Error::MissingDeck { .. } => "MissingDeck",
            Error::NotTopDegree { .. } => "NotTopDegree",
            Error::NonConvergent { .. } => "NonConvergent",
            Error::AlphaTooLarge { .. } => "AlphaTooLarge",
            Error::NoRegularValueFound { .. } => "NoRegularValueFound",
            Error::PositivityLost { .. } => "PositivityLost",
            Error::Precondition(_) => "Precondition",
            Error::InvalidScenario(_) => "InvalidScenario",
        }
    }
}
