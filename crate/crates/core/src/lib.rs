//! Simulation and limit-theory toolkit for the particle/agent pairing model.
//!
//! Particles of `J` types pair with agents and split again; agents may be
//! created and destroyed. The crate provides the exact jump process, its
//! deterministic and diffusive scaling limits, exact stationary laws on small
//! instances, birth-death comparison queues, and statistical checks tying
//! simulation output to the limits.

pub mod coupling;
pub mod curve;
pub mod limits;
pub mod model;
pub mod ode;
pub mod pipelines;
pub mod queues;
pub mod rng;
pub mod stationary;
pub mod ssa;
pub mod verify;

pub use curve::{uniform_grid, LimitCurve};
pub use model::{
    build_finite, total_free, FiniteModel, ModelError, ModelParams, Regime, RegimeRequest, State,
    Transition, TransitionKind,
};
