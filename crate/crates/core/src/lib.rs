//! Decentralized domain generalization with style sharing, simulated at
//! desk scale.
//!
//! Devices on a peer graph train small CNNs by gossip SGD while exchanging
//! per-layer style statistics that feed feature-level style augmentation.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod model;
pub mod network;
pub mod stats;
pub mod style;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use model::{Model, ModelParams, ModelSpec};
pub use stats::{LayerStyle, StyleVector};
pub use style::{StyleLayerConfig, StyleMode, StylePlan};
pub use tensor::Tensor4;
