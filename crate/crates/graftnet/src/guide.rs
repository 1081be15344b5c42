//! The book's chapters, compiled as doc-tests.
//!
//! Each module embeds one chapter from `book/src/`, so `cargo test --doc`
//! runs every code block in the guide and the book cannot drift from the
//! library. (mdBook itself does not execute Rust blocks; this is the
//! standard workaround of routing them through rustdoc.)

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}

#[doc = include_str!("../../../book/src/gradients.md")]
pub mod gradients {}

#[doc = include_str!("../../../book/src/encoders.md")]
pub mod encoders {}

#[doc = include_str!("../../../book/src/grafting.md")]
pub mod grafting {}

#[doc = include_str!("../../../book/src/decoder.md")]
pub mod decoder {}

#[doc = include_str!("../../../book/src/objective.md")]
pub mod objective {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/data-and-cli.md")]
pub mod data_and_cli {}
