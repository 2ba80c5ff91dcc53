//! Frame-level video anomaly detection with a lightweight self-distilled
//! masked auto-encoder: a shared transformer encoder reconstructs masked
//! patches through a teacher decoder while a shallow student decoder is
//! distilled from the teacher's intermediate activations; the combined
//! reconstruction and teacher-student discrepancies score each frame.

pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod infer;
pub mod model;
pub mod motion;
pub mod plot;
pub mod train;
