//! Query-based HOI detector: patch backbone, shared encoder over early-fused
//! features, detection and interaction decoders, set matching and loss.

pub mod boxes;
pub mod loss;
pub mod matching;
pub mod net;

pub use loss::{detection_loss, hungarian_match, DetectionLoss, HoiTarget, LossWeights};
pub use matching::hungarian;
pub use net::{average_maps, Detection, Detector, DetectorConfig, FusedFeatureMap, Heads, InteractionOutputs, QueryBank};
