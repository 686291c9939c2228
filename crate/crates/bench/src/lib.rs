//! Benchmark orchestration on top of `mtsad-core`: CSV datasets and the raw
//! MSDS layout, model checkpoints, the effectiveness / robustness / transfer
//! / efficiency runs and the tables they produce.
//!
//! Outputs of a run live under `<out>/<run-id>/`:
//!
//! ```text
//! config.json                 config snapshot
//! reports/<verb>.json         full report of each verb
//! reports/effectiveness/*.json  one record per (method, dataset, seed)
//! reports/robustness/*.json   one record per method, per-seed detail inside
//! scores/*.csv                timeline scores of each effectiveness cell
//! traces/*.csv                training loss traces
//! tables/*.{csv,md}           rendered tables
//! ```
//!
//! Trained models are cached in `<out>/checkpoints/`, keyed by everything
//! that determines them, so the verbs share one training per cell.

pub mod checkpoint;
pub mod config;
pub mod io;
pub mod report;
pub mod run;

pub use config::BenchConfig;
pub use run::Bench;
