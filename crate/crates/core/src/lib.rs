//! Joint-space leader/follower teleoperation middleware.
//!
//! A scaled, kinematically equivalent leader arm is read over its servo bus
//! (or synthesised) and its joint angles are passed straight through to a
//! follower arm, with smoothing, start-up synchronisation, rate limiting and
//! safety monitoring in between.

pub mod clock;
pub mod follower_sim;
pub mod kinematics;
pub mod leader_bus;
pub mod leader_model;
pub mod teleop;
pub mod protocol;
pub mod recorder;
pub mod node;
