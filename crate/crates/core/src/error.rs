use thiserror::Error;

/// Errors raised by the library. Validation failures carry enough context to
/// report the offending input.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("distribution needs at least 2 outcomes, got {0}")]
    TooFewOutcomes(usize),
    #[error("entry {index} is not a valid probability: {value}")]
    InvalidEntry { index: usize, value: f64 },
    #[error("probabilities sum to {0}, not 1")]
    BadSum(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("mixture weight {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("product belief parameter {0} outside [0, 1]")]
    ParameterOutOfRange(f64),
    #[error("segment endpoints coincide")]
    DegenerateSegment,
    #[error("distribution outside the rule domain (entry {index} = {value}, floor {floor})")]
    OutsideDomain { index: usize, value: f64, floor: f64 },
    #[error("point lies on the domain boundary; gradient undefined")]
    OnBoundary,
    #[error("outcome index {index} out of range for {k} outcomes")]
    OutcomeOutOfRange { index: usize, k: usize },
    #[error("unknown scoring rule tag {0:?}")]
    UnknownRule(String),
    #[error("invalid domain floor {floor} for {k} outcomes")]
    InvalidFloor { floor: f64, k: usize },
    #[error("budget must be non-negative and finite, got {0}")]
    NegativeBudget(f64),
    #[error("grid resolution {0} is too coarse (must be in (0, 0.01])")]
    ResolutionTooCoarse(f64),
    #[error("oracle supports at most 4 outcomes, got {0}")]
    OracleDimension(usize),
    #[error("natural budget not monotone along the segment at alpha = {alpha}")]
    NonMonotoneBudget { alpha: f64 },
    #[error("budget bound mismatch: numeric {numeric}, analytic {analytic}")]
    BoundMismatch { numeric: f64, analytic: f64 },
    #[error("market already settled")]
    AlreadySettled,
    #[error("market not settled")]
    NotSettled,
    #[error("trade needs budget {required} but only {reported} was reported")]
    BudgetExceeded { required: f64, reported: f64 },
    #[error("scale factor is zero; belief cannot be identified")]
    ZeroScale,
    #[error("gradient vanishes numerically; no tangent direction")]
    DegenerateGradient,
    #[error("tangent sign structure violated: {0}")]
    SignStructure(String),
    #[error("double-tight walk left the domain interior")]
    WalkLeftDomain,
    #[error("no valid perturbation found down to radius {0}")]
    RadiusUnderflow(f64),
    #[error("market mechanism mismatch: expected {expected}")]
    WrongMechanism { expected: &'static str },
    #[error("i/o failure: {0}")]
    Io(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
