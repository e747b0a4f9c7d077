use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("duplicate record for entity {entity}, year {year}, variable {name}")]
    DuplicateRecord {
        entity: String,
        year: i32,
        name: String,
    },
    #[error("years are not contiguous: gap between {before} and {after}")]
    NonContiguousYears { before: i32, after: i32 },
    #[error("unknown variable: {0}")]
    UnknownVariable(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-positive value {value} under log for entity {entity}, year {year}")]
    NonPositiveLog { entity: String, year: i32, value: f64 },
    #[error("empty subset: predicate selected no entities")]
    EmptySubset,
    #[error("malformed FIPS code {code:?} on line {line}")]
    MalformedFips { line: usize, code: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("insufficient observations: need at least {needed}, have {have}")]
    InsufficientObservations { needed: usize, have: usize },
    #[error("collinear regressors: {}", .0.join(", "))]
    Collinear(Vec<String>),
    #[error("within transformation did not converge after {sweeps} sweeps")]
    DemeanNotConverged { sweeps: usize },
    #[error("clustering dimension {0} has a single cluster")]
    SingleCluster(String),
    #[error("factor with a single level: {0}")]
    SingleLevelFactor(String),
    #[error("optimum at the boundary of the feasible interval for {parameter} ({value})")]
    BoundaryOptimum { parameter: String, value: f64 },
    #[error("spatial operator I - rho W is singular at rho = {0}")]
    SingularOperator(f64),
    #[error("infeasible spatial parameter {name} = {value}; feasible interval ({lower}, {upper})")]
    InfeasibleParameter {
        name: String,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("factor iteration did not converge; last two coefficient iterates {previous:?} and {last:?}")]
    FactorNotConverged { previous: Vec<f64>, last: Vec<f64> },
    #[error("cross-sectional dependence statistic not computable: {0}")]
    NotComputable(String),
    #[error("fits are not comparable: {0}")]
    MismatchedSamples(String),
    #[error("zero-variance column: {0}")]
    ZeroVariance(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}
