//! The guide under `book/src`, one module per chapter, so that
//! `cargo test --doc` runs every code block.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/colorspaces.md")]
pub mod colorspaces {}
#[doc = include_str!("../../../book/src/preprocessing.md")]
pub mod preprocessing {}
#[doc = include_str!("../../../book/src/backbone.md")]
pub mod backbone {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/explanations.md")]
pub mod explanations {}
#[doc = include_str!("../../../book/src/psychophysics.md")]
pub mod psychophysics {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
