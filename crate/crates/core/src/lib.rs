//! Bilateral detector/vision-tower guidance for open-vocabulary HOI detection
//! on a synthetic world.

pub mod detector;
pub mod error;
pub mod evalmetrics;
pub mod fusionheads;
pub mod lsg;
pub mod model;
pub mod nncore;
pub mod par;
pub mod pipeline;
pub mod synthworld;
pub mod visiontower;

pub use error::{Error, Result};
