use super::net::DynamicsNet;
use super::trace::{contract, TraceEstimator};
use crate::dataio::rng::Rng;
use crate::error::{Error, Result};
use crate::odeint::{integrate, AugmentedState, Derivative, Direction, IntegrationSpec};
use crate::tensor::{Eager, Ops, Tensor};

/// Which accumulators an integration maintains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tracking {
    /// Value only (sampling).
    None,
    /// Value and log-density change.
    Logp,
    /// Log-density change plus kinetic-energy and Jacobian-norm penalties.
    Full,
}

#[derive(Clone, Debug)]
pub struct FlowOutput<V> {
    pub z: V,
    pub delta_logp: V,
    pub ke: V,
    pub jn: V,
}

/// Eager result of [`CnfBlock::forward_logp`].
#[derive(Clone, Debug, PartialEq)]
pub struct FlowResult {
    pub z: Tensor,
    pub delta_logp: f64,
    pub ke: f64,
    pub jn: f64,
}

/// One conditional continuous flow `z = g(x | cond)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CnfBlock {
    pub net: DynamicsNet,
    pub spec: IntegrationSpec,
    pub trace: TraceEstimator,
    pub state_shape: [usize; 3],
    /// Present exactly when the block is conditional.
    pub cond_shape: Option<[usize; 3]>,
}

impl CnfBlock {
    pub fn new(
        state_shape: [usize; 3],
        cond_shape: Option<[usize; 3]>,
        hidden: usize,
        stages: usize,
        spec: IntegrationSpec,
        trace: TraceEstimator,
        rng: &mut Rng,
    ) -> Result<Self> {
        if let Some(c) = cond_shape {
            if c[1..] != state_shape[1..] {
                return Err(Error::dim(format!(
                    "conditioning extents {:?} differ from state extents {:?}",
                    &c[1..],
                    &state_shape[1..]
                )));
            }
        }
        let cond_channels = cond_shape.map_or(0, |c| c[0]);
        let net = DynamicsNet::new(state_shape[0], cond_channels, hidden, stages, rng)?;
        Ok(Self {
            net,
            spec,
            trace,
            state_shape,
            cond_shape,
        })
    }

    pub fn is_conditional(&self) -> bool {
        self.cond_shape.is_some()
    }

    pub fn state_dims(&self) -> usize {
        self.state_shape.iter().product()
    }

    fn check_inputs(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<()> {
        if x.shape() != self.state_shape {
            return Err(Error::dim(format!(
                "flow input {:?} does not match state shape {:?}",
                x.shape(),
                self.state_shape
            )));
        }
        match (self.cond_shape, cond) {
            (Some(s), Some(c)) if c.shape() != s => Err(Error::dim(format!(
                "conditioning {:?} does not match {:?}",
                c.shape(),
                s
            ))),
            (Some(_), None) => Err(Error::contract("conditional flow called without a conditioning image")),
            (None, Some(_)) => Err(Error::contract("unconditional flow called with a conditioning image")),
            _ => Ok(()),
        }
    }

    /// Runs every stage on backend `b`. `params` are the network parameters as
    /// handles on `b` (leaves when training). Forward runs stages in order from
    /// `t0` to `t1`; reverse undoes them last-first from `t1` to `t0`.
    #[allow(clippy::too_many_arguments)]
    pub fn flow_on<B: Ops>(
        &self,
        b: &B,
        params: &[B::V],
        x: B::V,
        cond: Option<&B::V>,
        spec: &IntegrationSpec,
        trace: &TraceEstimator,
        direction: Direction,
        tracking: Tracking,
        rng: &mut Rng,
    ) -> Result<FlowOutput<B::V>> {
        self.check_inputs(&b.value(&x), cond.map(|c| b.value(c)).as_deref())?;
        let order: Vec<usize> = match direction {
            Direction::Forward => (0..self.net.stages).collect(),
            Direction::Reverse => (0..self.net.stages).rev().collect(),
        };
        let mut state = AugmentedState::start(b, x);
        for stage in order {
            let p = self.net.stage_slice(params, stage);
            let probes: Vec<B::V> = if tracking == Tracking::None {
                Vec::new()
            } else {
                trace
                    .probes(&self.state_shape, rng)?
                    .into_iter()
                    .map(|t| b.constant(t))
                    .collect()
            };
            let weight = trace.weight(probes.len());
            let dynamics = |v: &B::V, t: f64| -> Result<Derivative<B::V>> {
                let (f, jvps) = self.net.eval_stage(b, p, v, t, cond, &probes)?;
                match tracking {
                    Tracking::None => Ok(Derivative::value_only(f)),
                    Tracking::Logp => {
                        let (tr, _) = contract(b, &probes, &jvps, weight)?;
                        Ok(Derivative {
                            dv: f,
                            trace: Some(tr),
                            ke: None,
                            jn: None,
                        })
                    }
                    Tracking::Full => {
                        let (tr, jn) = contract(b, &probes, &jvps, weight)?;
                        let ke = b.dot(&f, &f)?;
                        Ok(Derivative {
                            dv: f,
                            trace: Some(tr),
                            ke: Some(ke),
                            jn: Some(jn),
                        })
                    }
                }
            };
            state = integrate(b, dynamics, state, spec, direction)?;
        }
        Ok(FlowOutput {
            z: state.v,
            delta_logp: state.dlogp,
            ke: state.ke,
            jn: state.jn,
        })
    }

    fn eager_params(&self) -> Vec<<Eager as Ops>::V> {
        self.net.params().iter().map(|p| Eager.constant(p.clone())).collect()
    }

    /// `x -> z` with `Δlog p = −∫ Tr(∂f/∂v) dt` and the regularizer integrals,
    /// using the block's own solver and trace settings.
    pub fn forward_logp(&self, x: &Tensor, cond: Option<&Tensor>, rng: &mut Rng) -> Result<FlowResult> {
        self.forward_logp_with(x, cond, &self.spec, &self.trace, rng)
    }

    pub fn forward_logp_with(
        &self,
        x: &Tensor,
        cond: Option<&Tensor>,
        spec: &IntegrationSpec,
        trace: &TraceEstimator,
        rng: &mut Rng,
    ) -> Result<FlowResult> {
        let b = Eager;
        let cond = cond.map(|c| b.constant(c.clone()));
        let out = self.flow_on(
            &b,
            &self.eager_params(),
            b.constant(x.clone()),
            cond.as_ref(),
            spec,
            trace,
            Direction::Forward,
            Tracking::Full,
            rng,
        )?;
        Ok(FlowResult {
            z: out.z.as_ref().clone(),
            delta_logp: out.delta_logp.item()?,
            ke: out.ke.item()?,
            jn: out.jn.item()?,
        })
    }

    /// `x -> z` without any accumulators.
    pub fn forward(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        self.transport(x, cond, Direction::Forward)
    }

    fn transport(&self, v: &Tensor, cond: Option<&Tensor>, direction: Direction) -> Result<Tensor> {
        let b = Eager;
        let cond = cond.map(|c| b.constant(c.clone()));
        // probes are never drawn without tracking
        let mut unused = crate::dataio::rng::seeded(0);
        let out = self.flow_on(
            &b,
            &self.eager_params(),
            b.constant(v.clone()),
            cond.as_ref(),
            &self.spec,
            &self.trace,
            direction,
            Tracking::None,
            &mut unused,
        )?;
        Ok(out.z.as_ref().clone())
    }

    /// `z -> x`, integrating backwards in time.
    pub fn inverse(&self, z: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        self.transport(z, cond, Direction::Reverse)
    }

    /// Inverse pass that also accumulates the log-density change along the way.
    pub fn inverse_logp(&self, z: &Tensor, cond: Option<&Tensor>, rng: &mut Rng) -> Result<(Tensor, f64)> {
        let b = Eager;
        let cond = cond.map(|c| b.constant(c.clone()));
        let out = self.flow_on(
            &b,
            &self.eager_params(),
            b.constant(z.clone()),
            cond.as_ref(),
            &self.spec,
            &self.trace,
            Direction::Reverse,
            Tracking::Logp,
            rng,
        )?;
        Ok((out.z.as_ref().clone(), out.delta_logp.item()?))
    }
}
