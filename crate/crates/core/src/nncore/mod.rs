//! Differentiable numeric primitives.

pub mod attention;
pub mod gradcheck;
pub mod layers;
pub mod mat;
pub mod optim;
pub mod param;
pub mod tape;

pub use attention::{attention, biased_attention, AttentionResult};
pub use gradcheck::{grad_check, GradCheckReport};
pub use mat::Mat;
pub use optim::{clip_grad_norm, AdamW};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Grads, Tape, Var};

/// Marks every listed parameter as frozen. Frozen parameters keep passing
/// gradients to whatever feeds them.
pub fn freeze(store: &mut ParamStore, ids: &[ParamId]) {
    store.freeze(ids);
}
