//! Deterministic synthetic HOI world: scenes, captions and open-vocabulary splits.

pub mod caption;
pub mod catalog;
pub mod io;
pub mod scene;
pub mod split;

pub use caption::{caption_scene, CaptionRecord, CaptionVocab, Pos, TokenWeights};
pub use catalog::{Catalog, Combo};
pub use io::{Dataset, Sample};
pub use scene::{generate_scene, render, BBox, Entity, Image, Scene, Triplet, IMAGE_SIZE};
pub use split::{build_splits, SplitMode, SplitSpec};
