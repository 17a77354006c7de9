//! Repairing misspecified reward functions from pairwise trajectory
//! preferences on tabular MDPs.

pub mod baselines;
pub mod environments;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod preferences;
pub mod repair;
pub mod theory;

pub use error::{RepairError, Result};
