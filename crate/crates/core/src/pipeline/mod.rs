//! Orchestration: configuration, ingestion, subject-disjoint splits, the
//! staged run, and report rendering.

pub mod config;
pub mod ingest;
pub mod report;
pub mod run;
pub mod splits;

pub use config::RunConfig;
pub use ingest::{ingest, IngestReport, Reject};
pub use report::{render_reports, ModelFailure, Reports};
pub use run::{run_pipeline, AssociationOutput, Context, DiscriminationOutput, RunSummary, Stamp};
pub use splits::{audit, make_splits, AuditReport, Fractions, Split, SplitManifest};
