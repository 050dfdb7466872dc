//! Library half of the `uniflow` command: scenario parsing, the three run
//! commands, and their file outputs.

pub mod commands;
pub mod config;
pub mod output;
pub mod sweep;

use std::fmt;

use uniflow::analysis::AnalysisError;
use uniflow::sensitivity::SensError;
use uniflow::sim::SimError;
use uniflow::Termination;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const ZENO: i32 = 2;
    pub const GRAZING: i32 = 3;
    pub const MODEL: i32 = 4;
    pub const NO_RETURN: i32 = 5;
    pub const SCHEMA: i32 = 64;
    pub const IO: i32 = 74;
}

/// A command failure: exit code plus a message for stderr.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
    pub fn schema(message: impl Into<String>) -> Self {
        Self::new(exit::SCHEMA, message)
    }
    pub fn model(message: impl Into<String>) -> Self {
        Self::new(exit::MODEL, message)
    }
    pub fn io(message: impl Into<String>) -> Self {
        Self::new(exit::IO, message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub fn termination_code(t: &Termination<f64>) -> i32 {
    match t {
        Termination::TimeReached | Termination::Stopped { .. } => exit::OK,
        Termination::ZenoGuard { .. } => exit::ZENO,
        Termination::Grazing { .. } => exit::GRAZING,
        Termination::ModelError { .. } => exit::MODEL,
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        let code = match e {
            SimError::InvalidConfig(_) => exit::SCHEMA,
            _ => exit::MODEL,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<SensError> for Failure {
    fn from(e: SensError) -> Self {
        match e {
            SensError::Sim(s) => s.into(),
            SensError::Inadmissible(_) | SensError::NonTransversal { .. } => Failure::new(exit::GRAZING, e.to_string()),
            SensError::Dimension(_) => Failure::schema(e.to_string()),
            _ => Failure::model(e.to_string()),
        }
    }
}

impl From<AnalysisError> for Failure {
    fn from(e: AnalysisError) -> Self {
        let code = match &e {
            AnalysisError::Sens(s) => return s.clone().into(),
            AnalysisError::Sim(s) => return s.clone().into(),
            AnalysisError::NoReturn { .. } => exit::NO_RETURN,
            AnalysisError::Irregular { kind, .. } => match *kind {
                "zeno_guard" => exit::ZENO,
                "grazing" => exit::GRAZING,
                _ => exit::MODEL,
            },
            AnalysisError::NonTransversal(_) => exit::GRAZING,
            AnalysisError::OffSection(_) | AnalysisError::WeightNotSpd | AnalysisError::Dimension(_) => exit::SCHEMA,
            AnalysisError::Model(_) | AnalysisError::NoConvergence(_) => exit::MODEL,
        };
        Failure::new(code, e.to_string())
    }
}
