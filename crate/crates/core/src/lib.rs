//! Combination of multiple global descriptors (CGD) for image retrieval.
//!
//! A small convolutional backbone produces a `C x H x W` feature map. Several
//! descriptor branches pool it (SPoC, MAC or GeM), project each pooled vector
//! with a bias-free FC layer, L2-normalize, and concatenate the branches into
//! one unit-norm embedding. Training sums a batch-hard triplet loss on that
//! embedding with a temperature-scaled, label-smoothed softmax loss on the
//! first branch's pooled descriptor. Retrieval quality is measured with
//! Recall@K over an exhaustive cosine nearest-neighbour search.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod descriptor;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod loss;
pub mod model;
pub mod retrieval;
pub mod tensor;
pub mod trainer;

pub use descriptor::{Architecture, Combination, DescriptorConfig, DescriptorKind};
pub use error::{CgdError, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
