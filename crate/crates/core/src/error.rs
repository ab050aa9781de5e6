use thiserror::Error;

use crate::scene_db::TableKind;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("zero quaternion cannot be used as a rotation")]
    ZeroQuaternion,
    #[error("non-finite quaternion component")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no {table} record with id '{id}'")]
pub struct LookupError {
    pub table: TableKind,
    pub id: String,
}

impl LookupError {
    pub fn new(table: TableKind, id: impl Into<String>) -> Self {
        Self {
            table,
            id: id.into(),
        }
    }
}

/// Rejections raised while building or loading a scene database.
#[derive(Debug, Error)]
pub enum DbError {
    #[error("{table} record {index} ('{id}'{frame_note}): field `{field}`: {message}", frame_note = frame_note(.frame))]
    Schema {
        table: TableKind,
        index: usize,
        id: String,
        frame: Option<String>,
        field: String,
        message: String,
    },
    #[error("{table} '{owner}' references missing {target} '{id}'")]
    Dangling {
        table: TableKind,
        owner: String,
        target: TableKind,
        id: String,
    },
    #[error("{table} '{id}'{frame_note}: `{field}` quaternion norm {norm} is not within 1e-3 of 1", frame_note = frame_note(.frame))]
    NonUnitQuaternion {
        table: TableKind,
        id: String,
        frame: Option<String>,
        field: &'static str,
        norm: f64,
    },
    #[error("duplicate {table} id '{id}'")]
    Duplicate { table: TableKind, id: String },
    #[error("{0}")]
    Invalid(String),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn frame_note(frame: &Option<String>) -> String {
    match frame {
        Some(f) => format!(" in frame '{f}'"),
        None => String::new(),
    }
}

/// Failures of the query algorithms.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskError {
    #[error(transparent)]
    Lookup(#[from] LookupError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("frames {frames:?} are not consecutive keyframes of one scene")]
    NonConsecutive { frames: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenerationError {
    #[error("scene '{scene_id}' has {frames} keyframes; at least 3 are required")]
    IneligibleScene { scene_id: String, frames: usize },
    #[error("template for {subtask} is missing context field `{field}`")]
    MissingContext {
        subtask: String,
        field: &'static str,
    },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("{metric} is undefined: no scorable pairs")]
    Undefined { metric: &'static str },
    #[error("duplicate prediction for pair '{0}'")]
    DuplicatePrediction(String),
    #[error("prediction references unknown pair '{0}'")]
    UnknownPair(String),
    #[error("prediction for pair '{pair_id}': {message}")]
    InvalidPrediction { pair_id: String, message: String },
    #[error("{0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("pair '{pair_id}' references frame '{frame_id}' that is not in the database")]
    DanglingFrame { pair_id: String, frame_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite feature value")]
    NonFinite,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("duplicate id '{0}' in scenario scripts")]
    ConflictingId(String),
    #[error("invalid scenario script: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}
