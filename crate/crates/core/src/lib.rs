//! A desk-scale lab for imitation by maximising evidence: a latent
//! state-space world model learned from action-labelled experience, a
//! policy that infers the missing actions of observation-only
//! demonstrations by maximising the same evidence lower bound, and
//! inverse-dynamics baselines, all on synthetic embodiments with exact
//! oracles.

pub mod baselines;
pub mod control;
pub mod datasets;
pub mod envs;
pub mod experiment;
pub mod imitation;
pub mod error;
pub mod gradcheck;
pub mod seeds;
pub mod worldmodel;

pub use error::{Error, Result};
