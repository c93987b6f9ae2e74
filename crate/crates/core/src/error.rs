use std::fmt;

use thiserror::Error;

/// Pipeline stage an error originated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Descriptors,
    Detection,
    Coarse,
    Fine,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Descriptors => "descriptors",
            Stage::Detection => "detection",
            Stage::Coarse => "coarse",
            Stage::Fine => "fine",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("no correspondences: {0}")]
    NoCorrespondence(String),

    #[error("degenerate batch: all {anchors} anchors were skipped")]
    DegenerateBatch { anchors: usize },

    #[error("degenerate scores: {0}")]
    DegenerateScores(String),

    #[error(
        "no consensus after {iterations} iterations: best inlier count {best_inliers}, \
         best median residual {best_median_residual:.4} m"
    )]
    NoConsensus {
        iterations: usize,
        best_inliers: usize,
        best_median_residual: f64,
    },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("{stage} stage: {source}")]
    AtStage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn at(self, stage: Stage) -> Self {
        match self {
            e @ Error::AtStage { .. } => e,
            e => Error::AtStage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// The error with any stage labels stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::AtStage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    /// True for failures meaning "the two inputs could not be related":
    /// missing overlap or correspondences, no robust consensus.
    pub fn is_no_consensus(&self) -> bool {
        matches!(
            self.root(),
            Error::NoConsensus { .. } | Error::NoCorrespondence(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
