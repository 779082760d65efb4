use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("scenario tree would hold {nodes} nodes, above the cap of {cap}; lower n_steps or bm_dim, or raise the cap")]
    TreeTooLarge { nodes: u128, cap: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("expected {expected} child values, got {got}")]
    Arity { expected: usize, got: usize },

    #[error("history query at time {query} from a node at time {now} would look into the future")]
    FutureQuery { query: f64, now: f64 },

    #[error("point is outside the domain of the convex function")]
    NotInDomain,

    #[error("generator reads past values but no frozen (Y, Z) paths were supplied")]
    MissingFrozenPaths,

    #[error("generator evaluation failed at t = {time}: {message}")]
    Generator { time: f64, message: String },

    #[error("declared {constant} = {declared} is violated by probes (needs at least {observed})")]
    Lipschitz {
        constant: &'static str,
        declared: f64,
        observed: f64,
    },

    #[error("custom prox disagrees with the bisection reference at y = {y}, eps = {epsilon}: objective gap {gap}")]
    CustomProx { y: f64, epsilon: f64, gap: f64 },

    #[error("terminal value on leaf {leaf} lies outside Dom(phi)")]
    TerminalOutsideDomain { leaf: usize },

    #[error("well-posedness gate failed: K e^(beta T) = {k_exp} is not below 6 L^2 = {six_l2}")]
    Gate { k_exp: f64, six_l2: f64 },

    #[error("Picard iteration {} after {iterations} iterations (last distance {last_distance:e}, last ratio {last_ratio})", if *.diverged { "diverged" } else { "did not converge" })]
    NotConverged {
        diverged: bool,
        iterations: usize,
        last_distance: f64,
        last_ratio: f64,
        distances: Vec<f64>,
    },

    #[error("not enough nonzero rows for a rate fit: need {needed}, have {have}")]
    InsufficientData { needed: usize, have: usize },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
