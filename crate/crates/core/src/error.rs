use thiserror::Error;

#[derive(Debug, Error)]
pub enum JlboError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate geometry: {0}")]
    Geometry(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("scene sampling gave up after {0} redraws")]
    SamplingExhausted(usize),

    #[error("jacobian of the {half} half is rank deficient ({rank} < {cols}); location parameters are not identifiable")]
    RankDeficient {
        half: &'static str,
        rank: usize,
        cols: usize,
    },

    #[error("fisher information is singular after regularization ({0}); increase the pilot count M or subcarriers N_S")]
    SingularFim(String),

    #[error("eigen-solver failed: {0}")]
    Eigen(String),

    #[error("assumption check refused the run: {0}")]
    AssumptionRefused(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<JlboError>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl JlboError {
    /// Strips iteration wrappers.
    pub fn root(&self) -> &JlboError {
        match self {
            JlboError::AtIteration { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_assumption_refusal(&self) -> bool {
        matches!(self.root(), JlboError::AssumptionRefused(_))
    }
}

pub type Result<T> = std::result::Result<T, JlboError>;
