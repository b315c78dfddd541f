use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("function is not convex (smallest Hessian eigenvalue {0:e})")]
    NotConvex(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("gradient of the merit function is zero, no Newton step to take")]
    ZeroGradient,

    #[error("Armijo condition not met after {0} halvings")]
    LineSearchFailed(usize),

    #[error("regularized Newton matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("the constraint set is empty")]
    Infeasible,

    #[error("no lower bound on the optimal value could be obtained")]
    NoLowerBound,

    #[error("computation budget exhausted: {0}")]
    BudgetExhausted(String),

    #[error("dual bound undefined: objective excess {0:e} is too small to divide by")]
    DualBoundUndefined(f64),

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("negative slack budget {0:e}: stability bookkeeping is corrupted")]
    NegativeSlackBudget(f64),

    #[error("plan is infeasible: {0}")]
    InfeasiblePlan(String),

    #[error("controller initialization failed: {0}")]
    Initialization(String),

    #[error("invariant set iteration did not converge within {0} steps")]
    IterationCap(usize),

    #[error("Riccati iteration diverged")]
    RiccatiDiverged,

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
