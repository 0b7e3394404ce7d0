//! Coarse-to-fine cross-modal person retrieval.
//!
//! Images and captions are mapped into a joint embedding space at three
//! granularities — one global vector, `D` coarse vectors produced by a
//! decoder whose learnable query tokens are shared across modalities, and
//! `P` part-level fine vectors (horizontal image bands / dedicated text
//! tokens). Training combines identity classification, hardest-negative
//! margin ranking, and a commonality-adaptive margin ranking loss that
//! relaxes the margin for body parts shared across identities. Retrieval
//! ranks a gallery by the summed per-granularity cosine similarity and is
//! scored with Recall@K.

// Index-based loops are the clearest form for the numeric kernels and the
// straight-line oracles that verify them.
#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod backbone;
pub mod data;
pub mod embedding;
pub mod error;
pub mod graph;
pub mod loss;
pub mod model;
pub mod retrieval;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
