//! Learned index functions for pooling and upsampling.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`kernels`], [`graph`] and [`ops`] form a small dense array
//!   engine with reverse-mode differentiation. [`graph::Graph`] records
//!   operations for backpropagation; [`ops::Eager`] evaluates the same
//!   operations without recording, for memory-bounded inference.
//! - [`indexfn`] holds reference index functions (max, average, weighted,
//!   pixel shuffle) used as oracles.
//! - [`indexnet`] builds the learned index blocks (holistic and depthwise,
//!   linear and nonlinear, with optional weak context) and their two
//!   normalisation branches.
//! - [`sampler`] implements indexed pooling and indexed upsampling.
//! - [`mattenet`], [`synthdata`] and [`metrics`] wire everything into a toy
//!   matting pipeline.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod capacity;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod indexfn;
pub mod indexnet;
pub mod kernels;
pub mod layers;
pub mod mattenet;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod params;
pub mod real;
pub mod rng;
pub mod sampler;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use ops::{Eager, Ops};
pub use params::{ParamId, ParamKind, ParamStore};
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;
