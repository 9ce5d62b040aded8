//! Contextual sparsity for batched decoding: routers that predict active MLP
//! neurons and attention heads, the selective kernels that skip the rest,
//! top-k calibration, and a small transformer decode engine to run them in.

pub mod analysis;
pub mod calibration;
pub mod engine;
pub mod error;
pub(crate) mod io;
pub mod kernels;
pub mod model;
pub mod routers;
pub mod tensor;

pub use calibration::{greedy_topk, GreedyConfig, LayerKTable};
pub use engine::{evaluate_perplexity, DecodeSession, RouterSet, SparsityMode, SparsityPolicy};
pub use error::{PolarError, Result};
pub use kernels::{
    gqa_selective_attention_decode, selective_gemm, selective_head_flash_attention_decode,
    sparse_mlp_forward, BatchHeadIndex, FlashBlockParams, NeuronIndexTensor,
};
pub use model::{Model, TransformerConfig};
pub use routers::{HeadRouter, MlpRouter, Router};
pub use tensor::{HeadTensor, KvCache, Matrix, NeuronMatrix};
