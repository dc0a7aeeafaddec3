//! Triplet manifests, synthetic data generation, and dataset statistics.

pub mod vocab;

pub mod manifest;
pub mod stats;
pub mod synth;

pub use manifest::{load_manifest, Manifest, ManifestRecord, Split};
pub use stats::{dataset_stats, DatasetStats};
pub use synth::synth_generate;
