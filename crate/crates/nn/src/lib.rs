//! Small reverse-mode autodiff engine and the neural blocks built on it.

pub mod attention;
pub mod error;
pub mod float;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use attention::AttentionSpec;
pub use error::{NnError, Result};
pub use float::Float;
pub use graph::{Gradients, Graph, NodeId};
pub use layers::{
    AttentionConfig, Embedding, FeedForward, FfnKind, Linear, MoeConfig, MoeFeedForward,
    MultiHeadAttention, Norm, NormKind,
};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
