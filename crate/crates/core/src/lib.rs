//! Numerical laboratory for a kinetic BGK-type equation whose redistribution
//! kernel is driven by a stationary finite-state Markov field, together with
//! the limiting stochastic diffusion equation and the tools that check the
//! diffusion-approximation algebra numerically.

pub mod coefficients;
pub mod config;
pub mod error;
pub mod generator;
pub mod grid;
pub mod harness;
pub mod kinetic;
pub mod moments;
pub mod pilot;
pub mod registry;
pub mod spde;
pub mod stats;
pub mod velocity;

pub use error::{Error, Hypothesis, Result};
pub use grid::{FieldRecord, Grid, GridField, ModeSpec, VectorField};
pub use moments::{moments, relaxation, Moments, PhaseField};
pub use pilot::{build_chain, ou_filter_step, path_rng, PilotChain, PilotPath, Resolvent};
pub use velocity::{make_velocity_model, VelocityModel, VelocitySpec};
