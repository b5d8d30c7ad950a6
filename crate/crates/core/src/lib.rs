//! Desk-scale neural architecture search over heterogeneous mixture-of-experts
//! (MoE) encoder-decoder transformers.
//!
//! The crate is organized around a single weight-sharing supernet:
//!
//! * [`space`] declares the search space and gene encoding,
//! * [`tensor`] is a minimal reverse-mode autodiff kernel with named,
//!   checkpointable parameter storage,
//! * [`model`] builds MoE transformer forward passes on that kernel,
//! * [`supernet`] extracts front-sliced subnets and trains with single-path
//!   one-shot sampling,
//! * [`cost`] counts parameters and FLOPs analytically,
//! * [`latency`] measures wall-clock translation latency,
//! * [`evolve`] runs constrained evolutionary search over genes,
//! * [`train`] owns schedules, standalone training and evaluation,
//! * [`data`] provides synthetic tasks and tiny-corpus loading,
//! * [`analyze`] summarizes searched architectures.
//!
//! All computation is single-threaded and deterministic for a fixed seed.

pub mod analyze;
pub mod cost;
pub mod data;
pub mod evolve;
pub mod jsonl;
pub mod latency;
pub mod model;
pub mod space;
pub mod supernet;
pub mod tensor;
pub mod train;
