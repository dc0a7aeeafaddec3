//! Desk-scale implementation of a cross-modal bidirectional interaction
//! model for referring image segmentation.
//!
//! The crate provides the three architecture blocks (context-aware prompt
//! modulation, language-guided feature aggregation with attention-deficit
//! compensation, and a mutual-interaction decoder), the combined
//! cross-entropy/Dice objective, IoU evaluation metrics, synthetic data
//! generation, and a verification layer of independent oracles plus a
//! finite-difference gradient harness. Everything runs on CPU at 64-bit
//! precision over a small reverse-mode tape.

pub mod capm;
pub mod config;
pub mod dataio;
pub mod dump;
pub mod encoders;
pub mod error;
pub mod lgfa;
pub mod metrics;
pub mod mid;
pub mod model;
pub mod objective;
pub mod params;
pub mod tape;
pub mod train;
pub mod verify;

pub use config::{ModelConfig, RunConfig};
pub use error::{CrobimError, Result};
