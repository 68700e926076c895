//! Generator/inquisitor design loop.
//!
//! The generator is one categorical distribution per architecture decision,
//! sampled with per-candidate seeds and refit to the best candidates of each
//! generation (cross-entropy method). The inquisitor trains each candidate
//! briefly on a proxy split and scores it with [`crate::objective::netscore`].
//! Candidates are repaired towards the FLOP budget before training and
//! rejected if they still miss it.

mod cem;
mod space;
mod zoo;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archdsl::{ParseError, ShapeError};
use crate::complexity::ComplexityReport;
use crate::objective::{Metrics, ObjectiveError};
use crate::train::TrainError;

pub use cem::{
    generate, inquire, repair, search, update, GeneratorState, HistoryEntry, ProxyEval, RepairOutcome, SearchConfig,
    SearchResult, REPAIR_ROUNDS,
};
pub use space::{build_prototype, residual_net, BlockType, Decision, SearchSpace, StageSpec};
pub use zoo::{compact_arch, reference_arch, ZOO_INPUT};

#[derive(Debug, Error)]
pub enum GenesisError {
    #[error("invalid search space: {0}")]
    Space(String),
    #[error("genome does not match the search space")]
    Genome,
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("no feasible architecture found")]
    NoFeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Index within its generation.
    pub id: usize,
    /// `None` for the prototype.
    pub generation: Option<usize>,
    /// Sampled decision indices; `None` for the prototype.
    pub genome: Option<Vec<usize>>,
    pub arch: crate::archdsl::ArchGraph,
    pub report: ComplexityReport,
    pub metrics: Option<Metrics>,
    pub feasible: bool,
    pub score: Option<f64>,
    /// Training diverged or the score was undefined; the score is then
    /// negative infinity.
    pub failed: bool,
}

impl Candidate {
    /// Score used for ranking: negative infinity when unscored.
    pub fn rank_score(&self) -> f64 {
        self.score.unwrap_or(f64::NEG_INFINITY)
    }
}
