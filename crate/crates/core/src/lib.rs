//! Explicit n-gram masked language modeling.
//!
//! The crate turns raw text into pre-training examples and trains a small
//! reference encoder on them:
//!
//! 1. [`corpus`] tokenizes text into words and subwords and counts word
//!    n-grams;
//! 2. [`lexicon`] scores n-grams with a T-test and keeps the top-k per order,
//!    forming the joint fine/n-gram identity space;
//! 3. [`segmenter`] splits sentences into n-gram segments by maximum
//!    matching;
//! 4. [`maskplan`] samples masked segments and lays out examples for the
//!    contiguous, explicit, comprehensive and relation objectives;
//! 5. [`model`] is a transformer encoder with hand-written backpropagation,
//!    prediction heads and a narrow generator;
//! 6. [`train`] holds the losses, the optimizer loop and n-gram perplexity.
//!
//! The guide under `book/` walks through each stage; its code listings are
//! compiled as doctests of this crate.

pub mod corpus;
pub mod error;
pub mod lexicon;
pub mod maskplan;
pub mod model;
pub mod segmenter;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/lexicon.md")]
    mod lexicon {}
    #[doc = include_str!("../../../book/src/segmentation.md")]
    mod segmentation {}
    #[doc = include_str!("../../../book/src/masking.md")]
    mod masking {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
