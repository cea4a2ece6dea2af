//! Shuffle-order augmentation workbench for accelerometer activity recognition.
//!
//! The pipeline combines two workers' labeled streams, optionally generates synthetic
//! activity segments with a conditional attention autoencoder, reorders segments under
//! one of three strategies, trains a transformer classifier on overlapping windows and
//! reports macro metrics across a grid of settings and seeds.

pub mod ingest;
pub mod labels;
pub mod numeric;
pub mod reorder;
pub mod windowing;
pub mod metrics;
pub mod checkpoint;
pub mod aae;
pub mod classifier;
pub mod experiment;
