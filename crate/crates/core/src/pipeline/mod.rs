//! Staged, file-backed run: prepare, train, tune, ensemble, evaluate,
//! explain, distill, report. Each stage records input and output hashes in
//! `manifests/<stage>.json` and refuses to start if an upstream file changed.

pub mod artifacts;
pub mod config;
pub mod models;
pub mod scores;
pub mod stages;

pub use artifacts::{sha256_hex, Stage, StageManifest};
pub use config::PipelineConfig;
pub use scores::ScoreTable;
pub use stages::{
    cmd_distill, cmd_ensemble, cmd_evaluate, cmd_explain, cmd_prepare, cmd_report, cmd_score, cmd_synth, cmd_train, cmd_tune,
    run_all, RunReport,
};
