//! Multi-color tree allreduce, a simulated and real transport for running
//! one async program per rank, segmented dataset shuffling and a small
//! synchronous SGD driver built on top of them.
//!
//! The guide in `book/` walks through each module; its code blocks run as
//! doc-tests of this crate.

pub mod bench;
pub mod collectives;
pub mod dimd;
pub mod error;
pub mod sgd;
pub mod topology;
pub mod transport;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/topology.md")]
    mod topology {}
    #[doc = include_str!("../../../book/src/transport.md")]
    mod transport {}
    #[doc = include_str!("../../../book/src/collectives.md")]
    mod collectives {}
    #[doc = include_str!("../../../book/src/dimd.md")]
    mod dimd {}
    #[doc = include_str!("../../../book/src/sgd.md")]
    mod sgd {}
    #[doc = include_str!("../../../book/src/bench.md")]
    mod bench {}
}
