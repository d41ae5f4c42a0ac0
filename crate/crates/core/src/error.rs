use thiserror::Error;

/// Errors produced by the planning pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate view: {0}")]
    DegenerateView(&'static str),
    #[error("singular homography (|det| = {0:e})")]
    Singular(f64),
    #[error("optical axis does not intersect the ground plane")]
    NoIntersection,
    #[error("mast target coincides with the body position")]
    Unreachable,
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("map initialization needs at least one registrable image")]
    EmptyInit,
    #[error("image alignment against the map failed: {0}")]
    AlignmentFailed(String),
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewMatches { needed: usize, got: usize },
    #[error("degenerate point configuration")]
    Degenerate,
    #[error("no consensus: best model has {inliers} inliers, need {needed}")]
    NoConsensus { inliers: usize, needed: usize },
    #[error("schedule needs at least two states, got {0}")]
    ScheduleTooShort(usize),
    #[error("no observation chain reaches the end of the horizon")]
    PlanIncomplete,
    #[error("no body path between start and goal")]
    NoPath,
    #[error("goal not reached within {0} steps")]
    MaxStepsExceeded(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
