//! Message-content rephrasing: copy-attention sequence models, an edit-tag
//! alternative, and the evaluation metrics used to compare them.

pub mod corpus;
pub mod editops;
pub mod error;
pub mod metrics;
pub mod models;
pub mod text;
pub mod train;

pub use error::{Error, Result};

/// The guide's code samples, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/edit-tags.md")]
    mod edit_tags {}
    #[doc = include_str!("../../../book/src/copy-attention.md")]
    mod copy_attention {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
