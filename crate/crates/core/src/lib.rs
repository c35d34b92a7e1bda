//! End-to-end ground-to-aerial person search: a two-stage detector with dual
//! (student/teacher) ReID heads, head-level knowledge distillation losses,
//! dataset and retrieval-protocol tooling, and the mAP/CMC evaluation stack.
//!
//! The crate is organized around five areas:
//!
//! - [`data`]: annotation schema, dataset statistics, query/gallery protocol
//!   construction, and a seeded synthetic dual-view generator.
//! - [`model`]: backbone, region proposals, detection head, RoI pooling, and
//!   the student/teacher ReID heads with gradient detach.
//! - [`loss`]: OIM loss with lookup table and circular queue, probability and
//!   relation distillation, and loss composition/reporting.
//! - [`eval`]: IoU matching, detection Recall/AP, search mAP and CMC, and
//!   altitude-stratified reporting.
//! - [`train`]: configs, schedules, the SGD training loop, checkpoints, and
//!   the ablation driver.
//!
//! [`autograd`] and [`nn`] are the differentiation and layer substrate the
//! model and losses are built on.

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{CoreError, Result};
