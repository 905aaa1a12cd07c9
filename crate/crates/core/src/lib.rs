//! Sequence-to-sequence translation with Guided Dynamic Routing.
//!
//! At every decoding step the decoder state guides an iterative
//! routing-by-agreement procedure that splits the source encodings into
//! translated (past), untranslated (future) and redundant capsules. The past
//! and future capsules are fed back into the prediction through a residual
//! feed-forward block.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. Everything touching files, clocks or the terminal lives in the
//! `gdr-cli` companion crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod backbone;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod graph;
pub mod inspect;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod real;
pub mod routing;
pub mod tensor;
pub mod train;

pub use config::{LossConfig, ModelConfig, RoutingConfig, TrainConfig};
pub use error::{Error, Result};
pub use graph::{Grads, Graph, Var};
pub use model::Model;
pub use params::{ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;
