//! Transfer learning for deep ensembles through a single shared shift vector.
//!
//! Every member of an ensemble keeps its pretrained encoder frozen; a single
//! trainable vector `v` is added to all encoders while each member trains its
//! own classifier head. The crate provides the network substrate ([`nn`]), the
//! shift mechanics ([`ensemble`]), the transfer strategies and their compute
//! accounting ([`training`]), diversity and uncertainty metrics ([`metrics`]),
//! synthetic and CSV datasets ([`data`]) and experiment orchestration
//! ([`runner`]).

pub mod data;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod runner;
pub mod training;

pub use error::{Error, Result};
