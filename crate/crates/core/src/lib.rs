//! Dual-teacher continual test-time adaptation on small batch-normalized MLPs.
//!
//! A student network is trained online by symmetric cross-entropy against two
//! teachers: a fast teacher that tracks the student by EMA, and a slow teacher
//! trained on prototype-contrastive, prototype-alignment and information
//! maximization objectives. Reliable fast-teacher features are kept in
//! per-class bounded priority queues whose entropy-weighted means act as class
//! prototypes. The crate also ships the synthetic corruption streams, metrics
//! and the run loop used to evaluate the method.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod numnet;
pub mod par;
pub mod protostore;
pub mod reliability;
pub mod rng;
pub mod runner;
pub mod streams;
pub mod trio;

pub use error::{Error, Result};
pub use numnet::{Matrix, NetworkParams, NetworkSpec, StatsMode};
