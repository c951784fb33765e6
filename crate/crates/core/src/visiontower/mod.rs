//! Frozen mini vision tower with duplicated cls tokens, detector-guided
//! attention bias, and a per-query reference path.

pub mod adapter;
pub mod layout;
pub mod tower;

pub use adapter::{upsample, BiasAdapter};
pub use layout::{build_block_bias, qformer_bias, vit_bias, BlockBiasMatrix, TokenLayout};
pub use tower::{patchify, PlainTowerOutputs, TowerBias, TowerConfig, TowerOutputs, VisionTower};
