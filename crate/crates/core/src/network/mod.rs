//! The backbone, regional branches and prediction heads.

pub mod config;
pub mod layers;
pub mod model;

pub use config::{ModelConfig, Preset, Switches};
pub use model::{fuse, BranchGrads, ForwardCache, Model};
