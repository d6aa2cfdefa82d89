//! Language-aware, task-conditioned object detection.
//!
//! A detector is asked a question at inference time: the set of label words
//! it should look for. The words are encoded as an order-free set, fused with
//! learned proposals by a multi-stage dynamic head, and every class logit is
//! a scaled cosine against a label embedding, so vocabularies from different
//! datasets can share one model.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod matching;
pub mod mdn;
pub mod nn;
pub mod sampler;
pub mod text;
pub mod train;

pub use error::{Error, Result};
