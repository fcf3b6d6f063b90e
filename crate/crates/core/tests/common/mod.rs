//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::sync::Arc;

use mrflow::cnf::{contract, CnfBlock, NoiseDist, TraceEstimator};
use mrflow::dataio::rng::seeded;
use mrflow::dataio::{Config, Dataset};
use mrflow::mrcnf::train::{level_loss_on, TrainOptions};
use mrflow::mrcnf::MrcnfModel;
use mrflow::odeint::IntegrationSpec;
use mrflow::tensor::{Eager, Ops, Tape, Tensor, Var};
use mrflow::Result;
use rand::Rng as _;

pub fn random_block(shape: [usize; 3], cond: Option<[usize; 3]>, stages: usize, seed: u64, spec: IntegrationSpec) -> CnfBlock {
    let mut rng = seeded(seed);
    let mut b = CnfBlock::new(shape, cond, 6, stages, spec, TraceEstimator::exact(), &mut rng).unwrap();
    b.net.randomize_output(0.4, &mut rng);
    b
}

/// Uniform entries in `[-scale, scale)`.
pub fn uniform(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn sample(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, seed, 1.0)
}

/// Dense `∂z/∂x` of the block's forward map by central differences.
pub fn dense_jacobian(b: &CnfBlock, x: &Tensor, h: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut jac = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.data_mut()[j] += h;
        xm.data_mut()[j] -= h;
        let zp = b.forward(&xp, None).unwrap();
        let zm = b.forward(&xm, None).unwrap();
        for i in 0..n {
            jac[i][j] = (zp.data()[i] - zm.data()[i]) / (2.0 * h);
        }
    }
    jac
}

/// `ln |det A|` by partial-pivot elimination.
pub fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        let p = a[col][col];
        acc += p.abs().ln();
        for r in col + 1..n {
            let f = a[r][col] / p;
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    acc
}

/// Multiplies every parameter by `k`.
pub fn amplify(b: &mut CnfBlock, k: f64) {
    for t in b.net.params_mut() {
        for w in t.data_mut() {
            *w *= k;
        }
    }
}

/// Dynamics value and `J·u` for each probe, first stage at `t = 0.3`.
pub fn stage_jvps(b: &CnfBlock, v: &Tensor, probes: &[Tensor]) -> (Tensor, Vec<Tensor>) {
    let e = Eager;
    let params: Vec<_> = b.net.params().iter().map(|p| e.constant(p.clone())).collect();
    let p = b.net.stage_slice(&params, 0);
    let probes: Vec<_> = probes.iter().map(|u| e.constant(u.clone())).collect();
    let (f, jv) = b.net.eval_stage(&e, p, &e.constant(v.clone()), 0.3, None, &probes).unwrap();
    (f.as_ref().clone(), jv.into_iter().map(|t| t.as_ref().clone()).collect())
}

pub fn dense_dynamics_jacobian(b: &CnfBlock, v: &Tensor) -> Vec<Vec<f64>> {
    let n = v.len();
    let basis = TraceEstimator::exact().probes(v.shape(), &mut seeded(0)).unwrap();
    let (_, cols) = stage_jvps(b, v, &basis);
    (0..n).map(|i| (0..n).map(|j| cols[j].data()[i]).collect()).collect()
}

/// Exact trace of the dynamics Jacobian through the basis-probe contraction.
pub fn exact_trace(b: &CnfBlock, v: &Tensor) -> f64 {
    let basis = TraceEstimator::exact().probes(v.shape(), &mut seeded(0)).unwrap();
    let (_, jv) = stage_jvps(b, v, &basis);
    let e = Eager;
    let pv: Vec<_> = basis.iter().map(|u| e.constant(u.clone())).collect();
    let jvv: Vec<_> = jv.iter().map(|u| e.constant(u.clone())).collect();
    contract(&e, &pv, &jvv, 1.0).unwrap().0.item().unwrap()
}

/// `n` single-probe estimates `uᵀJu`.
pub fn hutchinson_samples(b: &CnfBlock, v: &Tensor, noise: NoiseDist, n: usize, seed: u64) -> Vec<f64> {
    let probes = TraceEstimator::hutchinson(noise, n).probes(v.shape(), &mut seeded(seed)).unwrap();
    let (_, jv) = stage_jvps(b, v, &probes);
    probes
        .iter()
        .zip(&jv)
        .map(|(u, ju)| u.data().iter().zip(ju.data()).map(|(a, c)| a * c).sum())
        .collect()
}

/// Sample mean and standard error of the mean.
pub fn mean_se(s: &[f64]) -> (f64, f64) {
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

// ---- gradient checks ----

const FD_STEP: f64 = 1e-6;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖g − fd‖ / max(‖g‖, ‖fd‖)`.
pub fn rel_err(g: &[f64], fd: &[f64]) -> f64 {
    let diff: Vec<f64> = g.iter().zip(fd).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(g).max(norm(fd)).max(1e-12)
}

type EagerFn = fn(&Eager, &[Arc<Tensor>]) -> Result<Arc<Tensor>>;
type TapeFn = fn(&Tape, &[Var]) -> Result<Var>;

/// Worst relative error of `d/dx Σ w ⊙ f(x)` over the inputs, for a fixed random `w`.
pub fn op_gradient_error(inputs: Vec<Tensor>, eager: EagerFn, taped: TapeFn) -> f64 {
    let consts = |xs: &[Tensor]| xs.iter().map(|x| Eager.constant(x.clone())).collect::<Vec<_>>();
    let out_shape = eager(&Eager, &consts(&inputs)).unwrap().shape().to_vec();
    let w = uniform(&out_shape, 99, 1.0);
    let eval = |xs: &[Tensor]| -> f64 {
        let out = eager(&Eager, &consts(xs)).unwrap();
        out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };

    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = taped(&tape, &leaves).unwrap();
    let loss = tape.dot(&out, &tape.constant(w.clone())).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let g = grads.get_or_zeros(leaves[k], x.shape());
        let mut fd = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let mut xs = inputs.clone();
            xs[k].data_mut()[i] += FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * FD_STEP;
            fd.push((up - eval(&xs)) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(g.data(), &fd));
    }
    worst
}

macro_rules! cases {
    ($(($name:literal, [$($input:expr),* $(,)?], |$b:ident, $v:ident| $body:expr)),* $(,)?) => {
        vec![$({
            fn f<B: Ops>($b: &B, $v: &[B::V]) -> Result<B::V> {
                $body
            }
            ($name, op_gradient_error(vec![$($input),*], f::<Eager>, f::<Tape>))
        }),*]
    };
}

/// `(op, relative error)` for every differentiable op on the tape.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let r = uniform;
    cases![
        ("add", [r(&[2, 3], 1, 1.0), r(&[2, 3], 2, 1.0)], |b, v| b.add(&v[0], &v[1])),
        ("sub", [r(&[5], 1, 1.0), r(&[5], 2, 1.0)], |b, v| b.sub(&v[0], &v[1])),
        ("mul", [r(&[4], 1, 1.0), r(&[4], 2, 1.0)], |b, v| b.mul(&v[0], &v[1])),
        ("mul_self", [r(&[4], 3, 1.0)], |b, v| b.mul(&v[0], &v[0])),
        ("scale", [r(&[3], 1, 1.0)], |b, v| Ok(b.scale(&v[0], -2.5))),
        ("add_scalar", [r(&[3], 1, 1.0)], |b, v| Ok(b.add_scalar(&v[0], 0.7))),
        ("axpy", [r(&[3, 2], 1, 1.0), r(&[3, 2], 2, 1.0)], |b, v| b.axpy(&v[0], 1.7, &v[1])),
        ("sum", [r(&[2, 2, 2], 1, 1.0)], |b, v| Ok(b.sum(&v[0]))),
        ("dot", [r(&[6], 1, 1.0), r(&[6], 2, 1.0)], |b, v| b.dot(&v[0], &v[1])),
        ("matmul", [r(&[2, 3], 1, 1.0), r(&[3, 4], 2, 1.0)], |b, v| b.matmul(&v[0], &v[1])),
        ("conv3x3", [r(&[2, 4, 3], 1, 1.0), r(&[3, 2, 3, 3], 2, 1.0)], |b, v| b.conv3x3(&v[0], &v[1])),
        ("conv3x3_single_pixel", [r(&[2, 1, 1], 1, 1.0), r(&[2, 2, 3, 3], 2, 1.0)], |b, v| b.conv3x3(&v[0], &v[1])),
        ("conv2d_3x3", [r(&[2, 3, 3], 1, 1.0), r(&[2, 2, 3, 3], 2, 1.0), r(&[2], 3, 1.0)], |b, v| b
            .conv2d_3x3(&v[0], &v[1], &v[2])),
        ("add_bias_channels", [r(&[3, 2, 2], 1, 1.0), r(&[3], 2, 1.0)], |b, v| b.add_bias(&v[0], &v[1], 0)),
        ("add_bias_last_axis", [r(&[2, 4], 1, 1.0), r(&[4], 2, 1.0)], |b, v| b.add_bias(&v[0], &v[1], 1)),
        // wide range spans both branches of the stable softplus
        ("softplus", [r(&[16], 1, 40.0)], |b, v| Ok(b.softplus(&v[0]))),
        ("sigmoid", [r(&[16], 1, 8.0)], |b, v| Ok(b.sigmoid(&v[0]))),
        ("concat", [r(&[1, 2, 2], 1, 1.0), r(&[2, 2, 2], 2, 1.0)], |b, v| b.concat(&[v[0].clone(), v[1].clone()], 0)),
        ("reshape", [r(&[2, 3], 1, 1.0)], |b, v| {
            let x = b.reshape(&v[0], &[3, 2])?;
            b.mul(&x, &x)
        }),
        ("composite", [r(&[2, 3, 3], 1, 1.0), r(&[2, 2, 3, 3], 2, 1.0)], |b, v| {
            let h = b.softplus(&b.conv3x3(&v[0], &v[1])?);
            let g = b.mul(&h, &b.sigmoid(&v[0]))?;
            let s = b.sum(&g);
            b.add(&b.scale(&s, 0.5), &b.dot(&v[0], &v[0])?)
        }),
    ]
}

/// Relative error of the per-level training loss gradient over all parameters
/// of a small random two-level model.
pub fn level_loss_gradient_error(level: usize) -> f64 {
    let cfg = Config {
        levels: 2,
        net_hidden: 4,
        net_blocks: 2,
        solver_steps: 3,
        lambda_k: 0.1,
        lambda_j: 0.05,
        ..Config::default()
    };
    let data = Dataset::load("builtin:checkerboard_patches:n=1,size=4").unwrap();
    let mut model = MrcnfModel::new(&cfg, data.shape).unwrap();
    let mut rng = seeded(5);
    for b in &mut model.blocks {
        b.net.randomize_output(0.3, &mut rng);
    }
    let opts = TrainOptions::from_config(&cfg);
    let x = mrflow::dataio::bin_centres(&data.images[0]);
    let (state, cond) = model.layout.level_input(&x, level).unwrap();
    let block = model.block(level).unwrap().clone();
    let params = block.net.params().to_vec();

    let eager_loss = |ps: &[Tensor]| -> f64 {
        let vs: Vec<_> = ps.iter().map(|p| Eager.constant(p.clone())).collect();
        let l = level_loss_on(&Eager, &model.layout, level, &block, &vs, &state, cond.as_ref(), &opts, &mut seeded(8))
            .unwrap();
        l.loss.item().unwrap()
    };
    let tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let l = level_loss_on(&tape, &model.layout, level, &block, &leaves, &state, cond.as_ref(), &opts, &mut seeded(8))
        .unwrap();
    assert_eq!(tape.value(&l.loss).item().unwrap(), eager_loss(&params), "tape and eager disagree");
    let grads = tape.backward(l.loss).unwrap();

    let (mut g, mut fd) = (Vec::new(), Vec::new());
    for (k, p) in params.iter().enumerate() {
        g.extend_from_slice(grads.get_or_zeros(leaves[k], p.shape()).data());
        for i in 0..p.len() {
            let mut ps = params.clone();
            ps[k].data_mut()[i] += FD_STEP;
            let up = eager_loss(&ps);
            ps[k].data_mut()[i] -= 2.0 * FD_STEP;
            fd.push((up - eager_loss(&ps)) / (2.0 * FD_STEP));
        }
    }
    rel_err(&g, &fd)
}
