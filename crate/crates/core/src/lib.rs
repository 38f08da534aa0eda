//! Score-gated low-rank adaptation for small vision transformers.
//!
//! Every adapter block owns a scalar score; the block's residual is applied only
//! while the score is at or above a threshold, and the score is trained with a
//! straight-through gradient plus a sparsity penalty.

// `!(x > 0.0)` rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adapter;
pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use adapter::{
    active_fraction, gated_dora_forward, gated_lora_forward, indicator, regularizer_value, total_loss, AdapterBlock,
    AdapterKind, GateState, RegKind, RegularizerSpec,
};
pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use model::{enumerate_sites, ModelConfig, SiteId, SiteKind, VisionTransformer};
pub use tensor::Tensor;
