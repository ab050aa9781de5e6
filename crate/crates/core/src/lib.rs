//! Scene-database driven generation of driving instruction-response pairs.
//!
//! The pipeline: canonical annotations → [`scene_db::SceneDatabase`] →
//! query algorithms in [`task_sql`] → templated pairs in [`generation`] →
//! scoring in [`evaluation`] and corpus statistics in [`statistics`].
//! [`attention_ref`] holds a forward-only numeric reference of the
//! multi-view / BEV cross-attention blocks, and [`synth`] produces scripted
//! synthetic scenes used as a test corpus.

pub mod attention_ref;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod geometry;
pub mod jsonio;
pub mod scene_db;
pub mod statistics;
pub mod synth;
pub mod task_sql;

pub use error::{
    AttentionError, DbError, EvalError, GenerationError, GeometryError, LookupError, StatsError,
    SynthError, TaskError,
};
pub use geometry::{Quaternion, Vec3};
pub use scene_db::{build_database, CanonicalAnnotations, SceneDatabase, TableKind, View};
