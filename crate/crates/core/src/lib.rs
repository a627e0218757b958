//! Co-distillation on text-attributed graphs: a masked-text teacher with a
//! GCN, a structure-aware MLP student with a memory bank, PPR-based context
//! sampling and linear-probe evaluation.
//!
//! The guide in `book/` walks through each part with runnable examples.

pub mod config;
pub mod error;
pub mod eval;
pub mod models;
pub mod ppr;
pub mod rng;
pub mod sampler;
pub mod store;
pub mod tensor;
pub mod training;
pub mod text;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/graphs.md")]
    mod graphs {}
    #[doc = include_str!("../../../book/src/ppr.md")]
    mod ppr {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/text.md")]
    mod text {}
    #[doc = include_str!("../../../book/src/autograd.md")]
    mod autograd {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
