//! The guide under `book/src`, one module per chapter, so that
//! `cargo test --doc` runs its code blocks.

#[doc = include_str!("../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../book/src/geometry.md")]
pub mod geometry {}
#[doc = include_str!("../../book/src/trajectories.md")]
pub mod trajectories {}
#[doc = include_str!("../../book/src/camera.md")]
pub mod camera {}
#[doc = include_str!("../../book/src/pooling.md")]
pub mod pooling {}
#[doc = include_str!("../../book/src/encoding.md")]
pub mod encoding {}
#[doc = include_str!("../../book/src/formats.md")]
pub mod formats {}
#[doc = include_str!("../../book/src/pipeline.md")]
pub mod pipeline {}
#[doc = include_str!("../../README.md")]
pub mod readme {}
