//! Annotation service: candidate-UQ tasks paired with attention-check
//! questions, an append-only decision log, and UQ export.

pub mod server;
pub mod store;
pub mod tasks;

pub use server::{router, serve, SharedStore, StaticDirs};
pub use store::{
    export_uqs, load_results, AnnotationResult, AnnotationStore, ExportParams, Progress, RedundancyRule, StoreError,
    Submission,
};
pub use tasks::{create_tasks, AnnotationTask, SkippedCandidate, TaskView, ViewQuestion};
