//! Continuous normalizing flows.
//!
//! A [`CnfBlock`] integrates `dv/dt = f(v, t | cond)` and, alongside the state,
//! the instantaneous change of variables `d log p / dt = −Tr(∂f/∂v)` plus the
//! kinetic-energy (`‖f‖²`) and Jacobian-norm (`‖J‖²_F`) rates used as training
//! penalties. Traces come from forward-mode Jacobian-vector products pushed
//! through the network as ordinary taped operations, so training never needs
//! second derivatives.

mod block;
mod net;
mod trace;

pub use block::{CnfBlock, FlowOutput, FlowResult, Tracking};
pub use net::{DynamicsNet, LAYERS};
pub use trace::{contract, NoiseDist, TraceEstimator, TraceMode, EXACT_TRACE_MAX_DIMS};

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Ops, Tensor};

fn check_variance(variance: f64) -> Result<()> {
    if variance > 0.0 && variance.is_finite() {
        Ok(())
    } else {
        Err(Error::contract(format!("Gaussian variance must be positive, got {variance}")))
    }
}

/// `Σ_i log N(z_i; 0, variance)`.
pub fn gaussian_logp(z: &Tensor, variance: f64) -> Result<f64> {
    check_variance(variance)?;
    let norm = -0.5 * (2.0 * PI * variance).ln();
    Ok(z.data().iter().map(|v| norm - v * v / (2.0 * variance)).sum())
}

/// Differentiable [`gaussian_logp`].
pub fn gaussian_logp_on<B: Ops>(b: &B, z: &B::V, variance: f64) -> Result<B::V> {
    check_variance(variance)?;
    let n = b.value(z).len() as f64;
    let sq = b.dot(z, z)?;
    Ok(b.add_scalar(&b.scale(&sq, -0.5 / variance), -0.5 * n * (2.0 * PI * variance).ln()))
}
