//! Exploit pipelines over simulated victims.

pub mod branch;
pub mod cmpbn;
pub mod gcd;
pub mod montmul;
pub mod rsa;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::listing::ListingError;
use crate::stats::StatsError;
use crate::timing::TimingError;

/// Observed outcome of one execution of a secret-dependent branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Taken,
    NotTaken,
    Unclassified,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Taken => "taken",
            Direction::NotTaken => "not_taken",
            Direction::Unclassified => "unclassified",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchObservation {
    pub execution_index: usize,
    pub predicted: Direction,
    /// Distance from the decision threshold, or a p-value for test-based rules.
    pub confidence: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("discriminator step {step} out of range for runs of {len} steps")]
    StepOutOfRange { step: usize, len: usize },
    #[error("need at least 2 repetitions, got {0}")]
    TooFewRepetitions(usize),
    #[error("gcd operands must be non-zero")]
    ZeroOperand,
    #[error("trace contains unclassified directions")]
    UnclassifiedTrace,
    #[error("reconstructed operands do not contain the known operand")]
    ReconstructionMismatch,
    #[error("invalid phi: {0}")]
    InvalidPhi(String),
    #[error("no runs supplied")]
    NoRuns,
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error(transparent)]
    Listing(#[from] ListingError),
}
