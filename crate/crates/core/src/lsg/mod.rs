//! Caption supervision through a small frozen causal language model that
//! reads the caption-query embeddings as a soft prefix.

pub mod lm;
pub mod loss;

pub use lm::{causal_mask, corpus_nll, pretrain_lm, LmCheckpoint, LmConfig, PretrainConfig, Pretrained, ToyLM};
pub use loss::{caption_level_loss_variant, cosine_distance, lsg_loss, lsg_loss_with_weights, weighted_token_loss, LsgLossConfig};
