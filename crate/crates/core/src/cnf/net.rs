use rand::Rng as _;

use crate::dataio::rng::Rng;
use crate::error::{Error, Result};
use crate::tensor::{Ops, Tensor};

/// Convolutions per stage.
pub const LAYERS: usize = 4;
const PARAMS_PER_STAGE: usize = 2 * LAYERS;

/// Dynamics network `f(v, t | cond)`.
///
/// A stack of `stages` independent 4-layer 3x3 convolutional nets with softplus
/// activations. Each stage drives its own flow over `[t0, t1]`; the block
/// composes them. The input of every stage is the state, the conditioning
/// image (if any) and one constant plane holding `t`, stacked along channels.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsNet {
    pub state_channels: usize,
    pub cond_channels: usize,
    pub hidden: usize,
    pub stages: usize,
    params: Vec<Tensor>,
}

impl DynamicsNet {
    /// He-uniform init, `U(±sqrt(6 / fan_in))`; the last layer of every stage
    /// starts at zero so the untrained flow is the identity map.
    pub fn new(state_channels: usize, cond_channels: usize, hidden: usize, stages: usize, rng: &mut Rng) -> Result<Self> {
        if state_channels == 0 || hidden == 0 || stages == 0 {
            return Err(Error::contract("state channels, hidden width and stage count must be positive"));
        }
        let mut params = Vec::with_capacity(stages * PARAMS_PER_STAGE);
        for _ in 0..stages {
            for layer in 0..LAYERS {
                let (cin, cout) = Self::layer_dims(state_channels, cond_channels, hidden, layer);
                if layer == LAYERS - 1 {
                    params.push(Tensor::zeros(&[cout, cin, 3, 3]));
                    params.push(Tensor::zeros(&[cout]));
                } else {
                    let bound = (6.0 / (cin * 9) as f64).sqrt();
                    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
                    params.push(Tensor::new(&[cout, cin, 3, 3], draw(cout * cin * 9))?);
                    params.push(Tensor::new(&[cout], draw(cout))?);
                }
            }
        }
        Ok(Self {
            state_channels,
            cond_channels,
            hidden,
            stages,
            params,
        })
    }

    fn layer_dims(state: usize, cond: usize, hidden: usize, layer: usize) -> (usize, usize) {
        let cin = if layer == 0 { state + cond + 1 } else { hidden };
        let cout = if layer == LAYERS - 1 { state } else { hidden };
        (cin, cout)
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Replace every parameter; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::dim("parameter list does not match the network layout"));
        }
        self.params = params;
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.stages)
            .flat_map(|s| {
                (0..LAYERS).flat_map(move |l| {
                    [format!("stage{s}.conv{l}.weight"), format!("stage{s}.conv{l}.bias")]
                })
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Overwrites every stage's output layer with `U(-scale, scale)` draws,
    /// giving a non-trivial flow without training.
    pub fn randomize_output(&mut self, scale: f64, rng: &mut Rng) {
        for s in 0..self.stages {
            for k in [PARAMS_PER_STAGE - 2, PARAMS_PER_STAGE - 1] {
                let p = &mut self.params[s * PARAMS_PER_STAGE + k];
                for v in p.data_mut() {
                    *v = rng.random_range(-scale..scale);
                }
            }
        }
    }

    /// Parameters of one stage, as handles on `b`.
    pub fn stage_slice<'a, V>(&self, all: &'a [V], stage: usize) -> &'a [V] {
        &all[stage * PARAMS_PER_STAGE..(stage + 1) * PARAMS_PER_STAGE]
    }

    /// Evaluates stage `p` at `(v, t | cond)` and pushes each tangent through the
    /// linearization: returns `f` and `J_v f · u` for every `u` in `tangents`.
    pub fn eval_stage<B: Ops>(
        &self,
        b: &B,
        p: &[B::V],
        v: &B::V,
        t: f64,
        cond: Option<&B::V>,
        tangents: &[B::V],
    ) -> Result<(B::V, Vec<B::V>)> {
        let (cs, h, w) = b.value(v).chw()?;
        if cs != self.state_channels {
            return Err(Error::dim(format!(
                "state has {cs} channels, network expects {}",
                self.state_channels
            )));
        }
        let mut parts = vec![v.clone()];
        match (cond, self.cond_channels) {
            (None, 0) => {}
            (Some(c), n) if n > 0 => {
                let cv = b.value(c);
                if cv.shape() != [n, h, w] {
                    return Err(Error::dim(format!(
                        "conditioning image {:?} does not match [{n}, {h}, {w}]",
                        cv.shape()
                    )));
                }
                parts.push(c.clone());
            }
            (None, n) => return Err(Error::contract(format!("conditional flow needs a {n}-channel conditioning image"))),
            (Some(_), _) => return Err(Error::contract("unconditional flow was given a conditioning image")),
        }
        parts.push(b.constant(Tensor::full(&[1, h, w], t)));
        let mut act = b.concat(&parts, 0)?;

        let mut tans = Vec::with_capacity(tangents.len());
        if !tangents.is_empty() {
            let pad = b.constant(Tensor::zeros(&[self.cond_channels + 1, h, w]));
            for u in tangents {
                tans.push(b.concat(&[u.clone(), pad.clone()], 0)?);
            }
        }

        for layer in 0..LAYERS {
            let (weight, bias) = (&p[2 * layer], &p[2 * layer + 1]);
            let pre = b.conv2d_3x3(&act, weight, bias)?;
            let pre_t = tans.iter().map(|u| b.conv3x3(u, weight)).collect::<Result<Vec<_>>>()?;
            if layer == LAYERS - 1 {
                return Ok((pre, pre_t));
            }
            act = b.softplus(&pre);
            if !pre_t.is_empty() {
                let gate = b.sigmoid(&pre);
                tans = pre_t.iter().map(|u| b.mul(&gate, u)).collect::<Result<Vec<_>>>()?;
            }
        }
        unreachable!("loop returns at the last layer")
    }
}
