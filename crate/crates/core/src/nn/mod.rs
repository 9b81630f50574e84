//! Small CNN vocabulary with explicit per-layer backward passes.

pub mod gradcheck;
pub mod layers;
pub mod model;

pub use gradcheck::{grad_check, grad_check_replicated, GradCheckReport};
pub use layers::Padding;
pub use model::{
    BnStats, LayerKind, LayerSpec, ModelState, Network, ParamTag, Parameter, TrainPass,
};
