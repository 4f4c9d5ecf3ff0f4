//! Deterministic fixed-timestep simulator for cooperative driving automation.
//!
//! The crate is organised bottom-up:
//!
//! * [`world`] holds the map, vehicle bodies and the kinematic state advance.
//! * [`longitudinal`] produces accelerations, lateral curves and rollouts.
//! * [`platooning`] implements the membership protocol, gap regulation and
//!   merge-position selection.
//! * [`v2x`] is the message bus every cross-vehicle read goes through.
//! * [`scenario`] loads configurations and drives the simulation loop.
//! * [`evaluation`] turns traces into safety, stability and efficiency metrics.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod longitudinal;
pub mod platooning;
pub mod scenario;
pub mod v2x;
pub mod world;

pub use error::{Error, Result};
