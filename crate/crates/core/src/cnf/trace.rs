use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::dataio::rng::Rng;
use crate::error::{Error, Result};
use crate::tensor::{Ops, Tensor};

/// State size up to which [`TraceEstimator::auto`] picks the exact trace.
pub const EXACT_TRACE_MAX_DIMS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceMode {
    Exact,
    Hutchinson,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseDist {
    Rademacher,
    Gaussian,
}

/// How `Tr(∂f/∂v)` and the Jacobian-norm rate are obtained.
///
/// Both modes contract the Jacobian against a set of probe vectors `u_k` via
/// Jacobian-vector products: `tr ≈ w Σ_k u_kᵀ J u_k` and `‖J‖²_F ≈ w Σ_k ‖J u_k‖²`.
/// Exact mode uses the standard basis with `w = 1`; Hutchinson mode draws `n`
/// zero-mean unit-covariance probes once per integration and uses `w = 1/n`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEstimator {
    pub mode: TraceMode,
    pub noise: NoiseDist,
    pub samples: usize,
}

impl TraceEstimator {
    pub fn exact() -> Self {
        Self {
            mode: TraceMode::Exact,
            noise: NoiseDist::Gaussian,
            samples: 1,
        }
    }

    pub fn hutchinson(noise: NoiseDist, samples: usize) -> Self {
        Self {
            mode: TraceMode::Hutchinson,
            noise,
            samples,
        }
    }

    /// Exact for states of at most [`EXACT_TRACE_MAX_DIMS`] elements, else one
    /// Gaussian probe.
    pub fn auto(state_dims: usize) -> Self {
        if state_dims <= EXACT_TRACE_MAX_DIMS {
            Self::exact()
        } else {
            Self::hutchinson(NoiseDist::Gaussian, 1)
        }
    }

    /// Probe vectors for one integration.
    pub fn probes(&self, shape: &[usize], rng: &mut Rng) -> Result<Vec<Tensor>> {
        let n: usize = shape.iter().product();
        match self.mode {
            TraceMode::Exact => (0..n)
                .map(|i| {
                    let mut e = Tensor::zeros(shape);
                    e.data_mut()[i] = 1.0;
                    Ok(e)
                })
                .collect(),
            TraceMode::Hutchinson => {
                if self.samples == 0 {
                    return Err(Error::contract("Hutchinson estimator needs at least one sample"));
                }
                (0..self.samples)
                    .map(|_| {
                        let data = match self.noise {
                            NoiseDist::Gaussian => (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                            NoiseDist::Rademacher => {
                                (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
                            }
                        };
                        Tensor::new(shape, data)
                    })
                    .collect()
            }
        }
    }

    pub fn weight(&self, probes: usize) -> f64 {
        match self.mode {
            TraceMode::Exact => 1.0,
            TraceMode::Hutchinson => 1.0 / probes as f64,
        }
    }
}

/// `(trace, jacobian_norm)` rates from probes and their Jacobian products.
pub fn contract<B: Ops>(b: &B, probes: &[B::V], jvps: &[B::V], weight: f64) -> Result<(B::V, B::V)> {
    let mut trace: Option<B::V> = None;
    let mut norm: Option<B::V> = None;
    for (u, ju) in probes.iter().zip(jvps) {
        let t = b.dot(u, ju)?;
        let n = b.dot(ju, ju)?;
        trace = Some(match trace {
            None => t,
            Some(acc) => b.add(&acc, &t)?,
        });
        norm = Some(match norm {
            None => n,
            Some(acc) => b.add(&acc, &n)?,
        });
    }
    let zero = || b.constant(Tensor::scalar(0.0));
    let trace = trace.unwrap_or_else(zero);
    let norm = norm.unwrap_or_else(zero);
    if weight == 1.0 {
        Ok((trace, norm))
    } else {
        Ok((b.scale(&trace, weight), b.scale(&norm, weight)))
    }
}
