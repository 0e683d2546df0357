//! Compiles the guide's snippets as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/sensing.md")]
pub mod sensing {}
#[doc = include_str!("../../../book/src/unfolding.md")]
pub mod unfolding {}
#[doc = include_str!("../../../book/src/gating.md")]
pub mod gating {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/service.md")]
pub mod service {}
