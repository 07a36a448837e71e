//! Differentiable building blocks shared by the encoder, the codec and the
//! diffusion backbone: a reverse-mode tape, layers, AdamW and checkpoints.
//!
//! Computation runs in `f64`. Training rounds parameters to `f32` after each
//! optimizer step so checkpoints (which store `f32`) reload bit-exactly.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub type Mat = ndarray::Array2<f64>;

pub use gradcheck::grad_check;
pub use graph::{Grads, Graph, NodeId};
pub use layers::{pool_tokens, Activation, Gate2, Init, LayerNorm, Linear, Mlp, PoolMode, TransformerEncoder};
pub use optim::{cosine_warmup_lr, AdamW};
pub use params::{ParamId, ParamStore, ParamTensor};
