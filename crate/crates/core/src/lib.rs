//! Fully distributed state estimation and cooperative stabilization of
//! multi-channel LTI plants over directed graphs.
//!
//! Every node runs an adaptive-gain output estimator, a state estimator and a
//! local controller using only its in-neighbors' estimates. [`synthesis`]
//! designs the gains, [`sim`] integrates the closed loop, and [`config`] and
//! [`scenarios`] describe runs.

pub mod config;
pub mod error;
pub mod export;
pub mod graph;
pub mod linalg;
pub mod node;
pub mod ode;
pub mod plant;
pub mod scenarios;
pub mod sim;
pub mod synthesis;
pub mod verification;

pub use error::{Error, Result};
