//! Part-based robust classifiers at desk scale.
//!
//! A part segmenter composed with a tiny classifier, trained end to end with
//! combined segmentation-classification losses under PGD or TRADES
//! adversarial training, evaluated on a procedural part-annotated dataset
//! with corruption / background-swap / texture-swap benchmarks.
//!
//! The crate is a library first. Each major capability has a runnable
//! example:
//!
//! ```bash
//! cargo run --release --example gradient_check
//! cargo run --release --example generate_dataset
//! cargo run --release --example soft_bounding_boxes
//! cargo run --release --example train_part_model
//! cargo run --release --example pgd_attack_demo
//! cargo run --release --example trades_sweep
//! cargo run --release --example robustness_benchmarks
//! ```
//!
//! A thin `partrobust` binary exposes the same pipeline for batch use:
//! `partrobust <command> --config <path> [--set k=v ...] [--out <dir>]`.

pub mod attacks;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod diffcore;
pub mod evalreport;
pub mod losses;
pub mod models;
pub mod partfeat;
pub mod trainer;

pub mod seeds;

mod error;

pub use error::{Error, Result};
