//! Intra-camera supervised person re-identification on synthetic
//! multi-camera feature data.
//!
//! Training data carries identity labels that are only valid inside one
//! camera. Stage 1 ([`intrastage`]) learns an embedding from those labels
//! with a camera-specific memory classifier and a quintuplet loss. Stage 2
//! associates IDs across cameras with a mutual nearest-neighbour graph
//! ([`association`]) and re-trains on the resulting pseudo labels
//! ([`interstage`]). [`evaluation`] scores embeddings by cross-camera
//! retrieval.
//!
//! ```
//! use icsreid::dataset::{generate, GeneratorConfig};
//!
//! let data = generate(&GeneratorConfig { num_persons: 5, ..Default::default() })?;
//! let layout = data.layout();
//! assert_eq!(layout.num_ids(), layout.ids_per_camera().iter().sum::<usize>());
//! # Ok::<(), icsreid::Error>(())
//! ```

pub mod association;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod interstage;
pub mod intrastage;
pub mod losses;
pub mod memory;
pub mod model;
pub mod pipeline;
pub mod sampler;

pub use error::{Error, Result};

/// Guide chapters, compiled here so their code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
    #[doc = include_str!("../../../book/src/memory.md")]
    mod memory {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/association.md")]
    mod association {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
