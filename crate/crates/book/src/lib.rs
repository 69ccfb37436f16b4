//! The guide in `book/`, compiled so that `cargo test` runs its snippets.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/density.md")]
pub mod density {}
#[doc = include_str!("../../../book/src/assembly.md")]
pub mod assembly {}
#[doc = include_str!("../../../book/src/spectrum.md")]
pub mod spectrum {}
#[doc = include_str!("../../../book/src/sweep.md")]
pub mod sweep {}
#[doc = include_str!("../../../book/src/dynamics.md")]
pub mod dynamics {}
#[doc = include_str!("../../../book/src/resolvent.md")]
pub mod resolvent {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
