//! Continuous-time tensor decomposition with latent ODE factor trajectories
//! and automatic rank determination.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod nets;
pub mod odeint;
pub mod params;
pub mod predict;
pub mod rank;
pub mod specialmath;
pub mod train;

pub use error::{Error, Result};
