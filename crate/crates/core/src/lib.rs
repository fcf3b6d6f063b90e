//! Multi-resolution continuous normalizing flows.
//!
//! An image is split into a coarse-to-fine stack of detail coefficients plus a
//! base image ([`multires`]); each level is modeled by a conditional continuous
//! flow ([`cnf`]) integrated with [`odeint`], and the levels combine into an exact
//! image likelihood ([`mrcnf`]). [`ood`] holds the out-of-distribution scoring
//! tools and [`dataio`] the datasets, image I/O and config parsing.

pub mod cli;
pub mod cnf;
pub mod dataio;
pub mod error;
pub mod mrcnf;
pub mod multires;
pub mod odeint;
pub mod ood;
pub mod tensor;

pub use error::{Error, Result};
