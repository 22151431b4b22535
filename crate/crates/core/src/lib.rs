//! Shared human-machine lane keeping.
//!
//! A 2-DOF lateral vehicle model is steered jointly by a two-point preview
//! driver and an automatic controller. The controller combines LQ feedback,
//! curvature feedforward and a composite nonlinear term; its gains are
//! learned from trajectory data by policy iteration, and its updates are
//! scheduled by an event- or self-triggered rule.

pub mod adp;
pub mod cnf;
pub mod config;
pub mod driver;
pub mod error;
pub mod linalg;
pub mod plant;
pub mod shared;
pub mod sim;
pub mod trigger;

pub use error::{Error, Result};
