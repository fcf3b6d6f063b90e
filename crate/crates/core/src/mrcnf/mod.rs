//! The multi-resolution model: one conditional flow per resolution level,
//! chained coarse to fine.
//!
//! Level `s < S` models the detail coefficients `y_s` given the coarse image
//! `x_{s+1}`; level `S` models the coarsest image `x_S` alone. Training uses
//! ground-truth coarse images, generation the ones it just produced.

pub mod checkpoint;
pub mod train;

use std::f64::consts::LN_2;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::cnf::{gaussian_logp, CnfBlock, TraceEstimator};
use crate::dataio::rng::{derive, Rng};
use crate::dataio::{dequantize, Config};
use crate::error::{Error, Result};
use crate::multires::{check_divisible, decompose, mean_pyramid, patch_merge, NoiseRole, NoiseSchedule, TransformKind};
use crate::tensor::{ByteTensor, Tensor};

const STREAM_INIT: u64 = 0x1417;
const STREAM_DEQUANT: u64 = 0xde9;
const STREAM_SAMPLE: u64 = 0x5a3;

/// Shapes and bookkeeping shared by all levels; independent of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub levels: usize,
    pub kind: TransformKind,
    pub schedule: NoiseSchedule,
    /// Finest image `[C, H, W]`.
    pub image_shape: [usize; 3],
}

impl Layout {
    pub fn new(levels: usize, kind: TransformKind, noise_schedule: bool, image_shape: [usize; 3]) -> Result<Self> {
        if levels == 0 {
            return Err(Error::contract("a model needs at least one level"));
        }
        check_divisible(image_shape[1], image_shape[2], levels)?;
        Ok(Self {
            levels,
            kind,
            schedule: NoiseSchedule::new(kind, levels, noise_schedule),
            image_shape,
        })
    }

    pub fn image_dims(&self) -> usize {
        self.image_shape.iter().product()
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level == 0 || level > self.levels {
            return Err(Error::contract(format!("level {level} outside 1..={}", self.levels)));
        }
        Ok(())
    }

    /// Image `x_s` at level `s` (1 is finest).
    pub fn level_image_shape(&self, level: usize) -> Result<[usize; 3]> {
        self.check_level(level)?;
        let [c, h, w] = self.image_shape;
        Ok([c, h >> (level - 1), w >> (level - 1)])
    }

    /// Flow state at level `s`: details `[3C, ·, ·]`, or the base image at `S`.
    pub fn state_shape(&self, level: usize) -> Result<[usize; 3]> {
        if level == self.levels {
            return self.level_image_shape(level);
        }
        let [c, h, w] = self.level_image_shape(level + 1)?;
        Ok([3 * c, h, w])
    }

    pub fn cond_shape(&self, level: usize) -> Result<Option<[usize; 3]>> {
        self.check_level(level)?;
        if level == self.levels {
            Ok(None)
        } else {
            self.level_image_shape(level + 1).map(Some)
        }
    }

    pub fn prior_variance(&self, level: usize) -> Result<f64> {
        let role = if level == self.levels { NoiseRole::Base } else { NoiseRole::Detail };
        self.schedule.variance(level, role)
    }

    /// Transform log-determinant attributed to level `s` (the split `x_s → (y_s, x_{s+1})`).
    pub fn level_logdet(&self, level: usize) -> Result<f64> {
        self.check_level(level)?;
        if level == self.levels {
            return Ok(0.0);
        }
        let dims: usize = self.level_image_shape(level + 1)?.iter().product();
        Ok(match self.kind {
            TransformKind::Unimodular => 0.0,
            TransformKind::Haar => dims as f64 * 0.5f64.ln(),
        })
    }

    /// Ground-truth `(state, conditioning)` pairs for every level, finest first.
    pub fn level_inputs(&self, x: &Tensor) -> Result<Vec<(Tensor, Option<Tensor>)>> {
        if x.shape() != self.image_shape {
            return Err(Error::dim(format!(
                "image {:?} does not match model shape {:?}",
                x.shape(),
                self.image_shape
            )));
        }
        let stack = decompose(x, self.levels, self.kind)?;
        let pyramid = mean_pyramid(x, self.levels)?;
        let mut out: Vec<(Tensor, Option<Tensor>)> = stack
            .details
            .into_iter()
            .zip(pyramid.into_iter().skip(1))
            .map(|(y, c)| (y, Some(c)))
            .collect();
        out.push((stack.base, None));
        Ok(out)
    }

    pub fn level_input(&self, x: &Tensor, level: usize) -> Result<(Tensor, Option<Tensor>)> {
        self.check_level(level)?;
        Ok(self.level_inputs(x)?.swap_remove(level - 1))
    }
}

/// Per-level terms of the likelihood.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTerm {
    pub delta_logp: f64,
    pub prior_logp: f64,
    pub logdet: f64,
    pub ke: f64,
    pub jn: f64,
}

impl LevelTerm {
    /// This level's share of `log p(x)`.
    pub fn logp(&self) -> f64 {
        self.prior_logp - self.delta_logp + self.logdet
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Likelihood {
    pub logp: f64,
    pub levels: Vec<LevelTerm>,
    pub ke: f64,
    pub jn: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleSpec {
    pub count: usize,
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MrcnfModel {
    pub config: Config,
    pub layout: Layout,
    /// `blocks[s - 1]` is the flow of level `s`.
    pub blocks: Vec<CnfBlock>,
}

impl MrcnfModel {
    /// Fresh model; every block starts as the identity map.
    pub fn new(config: &Config, image_shape: [usize; 3]) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config.levels, config.transform, config.noise_schedule, image_shape)?;
        let blocks = (1..=layout.levels)
            .map(|s| {
                let state = layout.state_shape(s)?;
                let mut rng = derive(config.seed, &[STREAM_INIT, s as u64]);
                CnfBlock::new(
                    state,
                    layout.cond_shape(s)?,
                    config.net_hidden,
                    config.net_blocks,
                    config.evaluation_spec(),
                    evaluation_trace(state.iter().product()),
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            layout,
            blocks,
        })
    }

    pub fn levels(&self) -> usize {
        self.layout.levels
    }

    pub fn block(&self, level: usize) -> Result<&CnfBlock> {
        self.layout.check_level(level)?;
        Ok(&self.blocks[level - 1])
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.net.param_count()).sum()
    }

    fn level_term(&self, level: usize, state: &Tensor, cond: Option<&Tensor>, seed: u64) -> Result<LevelTerm> {
        let block = &self.blocks[level - 1];
        let mut rng = derive(seed, &[level as u64]);
        let out = block.forward_logp(state, cond, &mut rng)?;
        Ok(LevelTerm {
            delta_logp: out.delta_logp,
            prior_logp: gaussian_logp(&out.z, self.layout.prior_variance(level)?)?,
            logdet: self.layout.level_logdet(level)?,
            ke: out.ke,
            jn: out.jn,
        })
    }

    /// `log p(x)` for an image in `[0, 1)` space, with ground-truth conditioning.
    /// Levels are evaluated one after another, or all at once when `concurrent`;
    /// each level draws its own random stream so both give identical results.
    pub fn log_likelihood(&self, x: &Tensor, seed: u64, concurrent: bool) -> Result<Likelihood> {
        let inputs = self.layout.level_inputs(x)?;
        let eval = |(i, (state, cond)): (usize, &(Tensor, Option<Tensor>))| {
            self.level_term(i + 1, state, cond.as_ref(), seed)
        };
        let levels: Vec<LevelTerm> = if concurrent {
            inputs.par_iter().enumerate().map(eval).collect::<Result<_>>()?
        } else {
            inputs.iter().enumerate().map(eval).collect::<Result<_>>()?
        };
        let mut logp = 0.0;
        let (mut ke, mut jn) = (0.0, 0.0);
        for t in &levels {
            logp += t.logp();
            ke += t.ke;
            jn += t.jn;
        }
        Ok(Likelihood { logp, levels, ke, jn })
    }

    /// Bits per dimension of an 8-bit image: dequantize, then
    /// `−log p / (D ln 2) + 8`.
    pub fn bpd(&self, x: &ByteTensor, seed: u64) -> Result<f64> {
        let mut rng = derive(seed, &[STREAM_DEQUANT]);
        let xf = dequantize(x, &mut rng);
        let ll = self.log_likelihood(&xf, seed, false)?;
        Ok(bpd_from_logp(ll.logp, self.layout.image_dims()))
    }

    /// Per-level latents `z_s` (finest first) under ground-truth conditioning.
    pub fn encode(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.layout
            .level_inputs(x)?
            .iter()
            .enumerate()
            .map(|(i, (state, cond))| self.blocks[i].forward(state, cond.as_ref()))
            .collect()
    }

    /// Inverse of [`encode`](Self::encode), conditioning every level on the one
    /// just produced. Returns the image pyramid `[x_1, …, x_S]`.
    pub fn decode_pyramid(&self, latents: &[Tensor]) -> Result<Vec<Tensor>> {
        let s_max = self.levels();
        if latents.len() != s_max {
            return Err(Error::contract(format!("expected {s_max} latents, got {}", latents.len())));
        }
        let mut pyramid = vec![Tensor::zeros(&[0]); s_max];
        let mut coarse = self.blocks[s_max - 1].inverse(&latents[s_max - 1], None)?;
        pyramid[s_max - 1] = coarse.clone();
        for s in (1..s_max).rev() {
            let y = self.blocks[s - 1].inverse(&latents[s - 1], Some(&coarse))?;
            coarse = patch_merge(&y, &coarse, self.layout.kind)?;
            pyramid[s - 1] = coarse.clone();
        }
        Ok(pyramid)
    }

    pub fn decode(&self, latents: &[Tensor]) -> Result<Tensor> {
        Ok(self.decode_pyramid(latents)?.swap_remove(0))
    }

    /// `z_s ~ N(0, T²·σ_s²)` for every level.
    pub fn sample_latents(&self, temperature: f64, rng: &mut Rng) -> Result<Vec<Tensor>> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::contract("temperature must be positive"));
        }
        (1..=self.levels())
            .map(|s| {
                let shape = self.layout.state_shape(s)?;
                let std = temperature * self.layout.prior_variance(s)?.sqrt();
                Ok(gaussian_tensor(&shape, std, rng))
            })
            .collect()
    }

    /// One sample's pyramid, drawn from the stream of `(seed, index)`.
    pub fn generate_pyramid(&self, temperature: f64, seed: u64, index: usize) -> Result<Vec<Tensor>> {
        let mut rng = derive(seed, &[STREAM_SAMPLE, index as u64]);
        let z = self.sample_latents(temperature, &mut rng)?;
        self.decode_pyramid(&z)
    }

    /// Samples in `[0, 1]` space, unclamped.
    pub fn generate(&self, spec: &SampleSpec) -> Result<Vec<Tensor>> {
        (0..spec.count)
            .into_par_iter()
            .map(|i| Ok(self.generate_pyramid(spec.temperature, spec.seed, i)?.swap_remove(0)))
            .collect()
    }

    /// Upsamples `coarse` (an image at level `from`) to level `to ≤ from` by
    /// sampling the missing details.
    pub fn super_resolve(&self, coarse: &Tensor, from: usize, to: usize, temperature: f64, seed: u64) -> Result<Tensor> {
        self.layout.check_level(from)?;
        self.layout.check_level(to)?;
        if to > from {
            return Err(Error::contract(format!("target level {to} is coarser than source level {from}")));
        }
        let expect = self.layout.level_image_shape(from)?;
        if coarse.shape() != expect {
            return Err(Error::dim(format!(
                "input image has shape {:?}, level {from} expects {expect:?}",
                coarse.shape()
            )));
        }
        let mut rng = derive(seed, &[STREAM_SAMPLE, u64::MAX]);
        let mut x = coarse.clone();
        for s in (to..from).rev() {
            let std = temperature * self.layout.prior_variance(s)?.sqrt();
            let z = gaussian_tensor(&self.layout.state_shape(s)?, std, &mut rng);
            let y = self.blocks[s - 1].inverse(&z, Some(&x))?;
            x = patch_merge(&y, &x, self.layout.kind)?;
        }
        Ok(x)
    }
}

/// Exact trace for small states, otherwise one Gaussian probe.
pub fn evaluation_trace(state_dims: usize) -> TraceEstimator {
    TraceEstimator::auto(state_dims)
}

pub fn bpd_from_logp(logp: f64, dims: usize) -> f64 {
    -logp / (dims as f64 * LN_2) + 8.0
}

fn gaussian_tensor(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("finite positive std");
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("length matches")
}
