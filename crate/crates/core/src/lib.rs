//! Knowledge distillation for compressed-video quality assessment.
//!
//! A large ViT teacher and small students (a narrower ViT, or a factorized
//! 3D-CNN) regress a quality score from short clips. Students learn from
//! ground-truth scores and from the teacher's final-layer pooled feature.
//!
//! * [`model_zoo`]: encoders, forward/backward passes, parameter accounting
//! * [`distillation`]: the three-term loss, freeze policies, optimizer steps
//! * [`synth_data`]: procedural clips, compression-like distortions, score labels
//! * [`metrics`]: PLCC/SRCC, evaluation, comparison tables
//! * [`harness`]: experiment configs, checkpoints, and the CLI commands

pub mod distillation;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model_zoo;
pub mod seeding;
pub mod synth_data;

pub use error::{Error, Result};
