//! Adaptive regions of interest and multi-level relation graphs for facial
//! action unit recognition, at desk scale.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod kv;
pub mod network;
pub mod objective;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/sampler.md")]
    mod sampler {}
    #[doc = include_str!("../../../book/src/graph.md")]
    mod graph {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/checkpoint.md")]
    mod checkpoint {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
