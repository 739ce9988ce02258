//! Command-line orchestration of the reconstruction pipeline: configuration,
//! staged training, reconstruction, evaluation and ablation runs.
//!
//! Every command reads and writes below one output directory:
//!
//! ```text
//! <out>/dataset/                    simulated samples and their manifest
//! <out>/checkpoints/<stage>/        sketcher, vae, generator
//! <out>/reconstructions/<method>/   PNG previews, raw f32 images, sampler traces
//! <out>/reports/                    CSV and JSON metric reports
//! <out>/manifests/<command>.json    run manifests
//! ```

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::{ablation_table, run, run_with, Cli, Command, Options};
pub use config::{Overrides, PipelineConfig};
pub use manifest::{hash_dir, Layout, RunManifest};
