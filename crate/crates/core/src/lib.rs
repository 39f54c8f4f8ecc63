//! Intention-aware trajectory prediction for vehicles in roundabouts.
//!
//! Each vehicle's exit intention is inferred online by comparing its recent
//! track against candidate reference paths with dynamic time warping. The
//! resulting belief conditions a conditional variational autoencoder that
//! samples future trajectories for an interacting pair of cars.

pub mod baselines;
pub mod cvae;
pub mod diffcore;
pub mod dtw;
pub mod error;
pub mod geometry;
pub mod intention;
pub mod metrics;
pub mod rng;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/dtw.md")]
    mod dtw {}
    #[doc = include_str!("../../../book/src/intention.md")]
    mod intention {}
    #[doc = include_str!("../../../book/src/cvae.md")]
    mod cvae {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/synthdata.md")]
    mod synthdata {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
