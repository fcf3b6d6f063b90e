//! Per-level training. Levels share nothing but the data, so each can be
//! trained on its own, in any order or concurrently.

use std::f64::consts::LN_2;

use rayon::prelude::*;

use super::{Layout, MrcnfModel};
use crate::cnf::{gaussian_logp_on, CnfBlock, NoiseDist, TraceEstimator, Tracking};
use crate::dataio::rng::derive;
use crate::dataio::{dequantize, Config, Dataset};
use crate::error::{Error, Result};
use crate::odeint::{Direction, IntegrationSpec};
use crate::tensor::{Ops, Tape, Tensor};

const STREAM_ORDER: u64 = 0x0de5;
const STREAM_IMAGE: u64 = 0x1a6e;
const PLATEAU_PATIENCE: usize = 2;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lambda_k: f64,
    pub lambda_j: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub spec: IntegrationSpec,
    pub noise: NoiseDist,
}

impl TrainOptions {
    pub fn from_config(c: &Config) -> Self {
        Self {
            lr: c.lr,
            batch: c.batch,
            epochs: c.epochs,
            lambda_k: c.lambda_k,
            lambda_j: c.lambda_j,
            grad_clip: c.grad_clip,
            seed: c.seed,
            spec: c.training_spec(),
            noise: c.trace_noise,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub level: usize,
    pub epoch: usize,
    /// Mean objective per image dimension, nats.
    pub loss: f64,
    /// This level's share of the image bpd, without the +8 offset.
    pub bpd_contrib: f64,
    pub ke: f64,
    pub jn: f64,
    /// Mean pre-clip global gradient norm.
    pub grad_norm: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "level,epoch,loss,bpd_contrib,ke,jn,grad_norm";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.level, self.epoch, self.loss, self.bpd_contrib, self.ke, self.jn, self.grad_norm
        )
    }

    pub fn to_fields(&self) -> [f64; 5] {
        [self.loss, self.bpd_contrib, self.ke, self.jn, self.grad_norm]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Everything needed to continue training a level exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub best_loss: f64,
    pub bad_epochs: usize,
    pub adam: Adam,
    pub history: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(block: &CnfBlock, lr: f64) -> Self {
        Self {
            epoch: 0,
            lr,
            best_loss: f64::INFINITY,
            bad_epochs: 0,
            adam: Adam::new(block.net.params()),
            history: Vec::new(),
        }
    }

    /// Halve the learning rate after `PLATEAU_PATIENCE` epochs without improvement.
    fn end_epoch(&mut self, loss: f64) {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= PLATEAU_PATIENCE {
                self.lr *= 0.5;
                self.bad_epochs = 0;
            }
        }
        self.epoch += 1;
    }
}

/// Scales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

/// Differentiable per-level objective for one image.
#[derive(Clone, Debug)]
pub struct LevelLoss<V> {
    /// `(−log p_level + λ_K·K + λ_J·B) / D`, nats per image dimension.
    pub loss: V,
    /// `−log p` of this level's factor, nats.
    pub nll: f64,
    pub ke: f64,
    pub jn: f64,
}

/// Builds the level objective on backend `b` from this level's `(state, cond)`.
#[allow(clippy::too_many_arguments)]
pub fn level_loss_on<B: Ops>(
    b: &B,
    layout: &Layout,
    level: usize,
    block: &CnfBlock,
    params: &[B::V],
    state: &Tensor,
    cond: Option<&Tensor>,
    opts: &TrainOptions,
    rng: &mut crate::dataio::rng::Rng,
) -> Result<LevelLoss<B::V>> {
    let trace = TraceEstimator::hutchinson(opts.noise, 1);
    let cond = cond.map(|c| b.constant(c.clone()));
    let out = block.flow_on(
        b,
        params,
        b.constant(state.clone()),
        cond.as_ref(),
        &opts.spec,
        &trace,
        Direction::Forward,
        Tracking::Full,
        rng,
    )?;
    let prior = gaussian_logp_on(b, &out.z, layout.prior_variance(level)?)?;
    let nll = b.sub(&out.delta_logp, &prior)?;
    let reg = b.axpy(&b.scale(&out.ke, opts.lambda_k), opts.lambda_j, &out.jn)?;
    let loss = b.scale(&b.add(&nll, &reg)?, 1.0 / layout.image_dims() as f64);
    Ok(LevelLoss {
        nll: b.value(&nll).item()?,
        ke: b.value(&out.ke).item()?,
        jn: b.value(&out.jn).item()?,
        loss,
    })
}

struct ImageResult {
    loss: f64,
    nll: f64,
    ke: f64,
    jn: f64,
    grads: Vec<Tensor>,
}

fn image_gradient(
    layout: &Layout,
    level: usize,
    block: &CnfBlock,
    image: &crate::tensor::ByteTensor,
    opts: &TrainOptions,
    stream: &[u64],
) -> Result<ImageResult> {
    let mut rng = derive(opts.seed, stream);
    let x = dequantize(image, &mut rng);
    let (state, cond) = layout.level_input(&x, level)?;
    let tape = Tape::new();
    let leaves: Vec<_> = block.net.params().iter().map(|p| tape.leaf(p.clone())).collect();
    let l = level_loss_on(&tape, layout, level, block, &leaves, &state, cond.as_ref(), opts, &mut rng)?;
    let loss = tape.value(&l.loss).item()?;
    let g = tape.backward(l.loss)?;
    let grads = leaves
        .iter()
        .zip(block.net.params())
        .map(|(v, p)| g.get_or_zeros(*v, p.shape()))
        .collect();
    Ok(ImageResult {
        loss,
        nll: l.nll,
        ke: l.ke,
        jn: l.jn,
        grads,
    })
}

/// Runs one epoch on `block` (the flow of `level`) and appends its log row.
pub fn train_epoch(
    layout: &Layout,
    level: usize,
    block: &mut CnfBlock,
    data: &Dataset,
    opts: &TrainOptions,
    state: &mut TrainState,
) -> Result<EpochLog> {
    if data.shape != layout.image_shape {
        return Err(Error::dim(format!(
            "dataset images {:?} do not match model shape {:?}",
            data.shape, layout.image_shape
        )));
    }
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let epoch = state.epoch as u64;
    let lvl = level as u64;
    let mut order: Vec<usize> = (0..data.len()).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut derive(opts.seed, &[STREAM_ORDER, lvl, epoch]));
    }
    let dims = layout.image_dims() as f64;
    let logdet = layout.level_logdet(level)?;
    let (mut loss_sum, mut nll_sum, mut ke_sum, mut jn_sum, mut norm_sum) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut batches = 0usize;
    for chunk in order.chunks(opts.batch) {
        let frozen: &CnfBlock = block;
        let results: Vec<ImageResult> = chunk
            .par_iter()
            .map(|&i| image_gradient(layout, level, frozen, &data.images[i], opts, &[STREAM_IMAGE, lvl, epoch, i as u64]))
            .collect::<Result<_>>()?;
        let scale = 1.0 / results.len() as f64;
        let mut grads: Vec<Tensor> = block.net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        for r in &results {
            loss_sum += r.loss;
            nll_sum += r.nll;
            ke_sum += r.ke;
            jn_sum += r.jn;
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v * scale;
                }
            }
        }
        norm_sum += clip_global_norm(&mut grads, opts.grad_clip);
        batches += 1;
        state.adam.step(block.net.params_mut(), &grads, state.lr);
        if block.net.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                step: batches,
                time: state.epoch as f64,
            });
        }
    }
    let n = data.len() as f64;
    let log = EpochLog {
        level,
        epoch: state.epoch,
        loss: loss_sum / n,
        bpd_contrib: (nll_sum / n - logdet) / (dims * LN_2),
        ke: ke_sum / n,
        jn: jn_sum / n,
        grad_norm: norm_sum / batches as f64,
    };
    state.end_epoch(log.loss);
    state.history.push(log.clone());
    Ok(log)
}

/// Trains `level` until `opts.epochs` epochs are complete, calling
/// `on_epoch` after each one (for checkpointing).
pub fn train_level(
    model: &mut MrcnfModel,
    level: usize,
    data: &Dataset,
    opts: &TrainOptions,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&CnfBlock, &TrainState) -> Result<()>,
) -> Result<()> {
    let layout = model.layout.clone();
    layout.level_image_shape(level)?;
    let block = &mut model.blocks[level - 1];
    while state.epoch < opts.epochs {
        train_epoch(&layout, level, block, data, opts, state)?;
        on_epoch(block, state)?;
    }
    Ok(())
}
