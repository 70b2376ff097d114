mod binio;
pub mod corpus;
pub mod dense;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod hits;
pub mod jsonl;
pub mod lexical;
pub mod mining;
pub mod synthetic;
pub mod text;

pub use error::{Error, Result};

// The guide's Rust snippets run as doctests, one module per chapter.
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/fuzzy-matching.md")]
mod book_fuzzy_matching {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/dense-retrieval.md")]
mod book_dense_retrieval {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/training.md")]
mod book_training {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/calibration.md")]
mod book_calibration {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/pipeline.md")]
mod book_pipeline {}
