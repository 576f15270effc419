//! Simulation, moment analysis, divergence computation, lower bounds and
//! estimation for observations of a signal under a random finite group
//! action, a linear projection and additive Gaussian noise:
//! `Y = P G x + σ Z`.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod channel;
pub mod divergence;
pub mod error;
pub mod estimators;
pub mod group;
pub mod moments;
mod optimize;
pub mod rng;

pub use channel::{simulate, simulate_replicate, ChannelModel, ObservationBatch, Projection};
pub use error::{Error, Result};
pub use group::{cyclic_shift_group, FiniteGroup, GroupDistribution, Signal};
