mod common;

use common::*;
use mrflow::cnf::{gaussian_logp, gaussian_logp_on, CnfBlock, NoiseDist, TraceEstimator, Tracking};
use mrflow::dataio::rng::seeded;
use mrflow::odeint::{Direction, IntegrationSpec, Method};
use mrflow::tensor::{Ops, Tape, Tensor};

#[test]
fn change_of_variables_matches_dense_jacobian() {
    let spec = IntegrationSpec::fixed(Method::Rk4, 200);
    for (k, shape) in [[2, 1, 1], [3, 1, 1], [1, 2, 2]].into_iter().enumerate() {
        let mut b = random_block(shape, None, 2, 10 + k as u64, spec);
        // 1x1 images only see the centre taps; amplify so the map is far from identity
        amplify(&mut b, 2.0);
        let x = sample(&shape, 20 + k as u64);
        let out = b.forward_logp(&x, None, &mut seeded(0)).unwrap();
        let logdet = log_abs_det(dense_jacobian(&b, &x, 1e-5));
        assert!(logdet.abs() > 1e-2, "flow too close to identity to be informative: {logdet}");
        // log p(x) = log p(z) + log|det ∂z/∂x|, and the accumulated change is −∫Tr
        assert!((-out.delta_logp - logdet).abs() < 1e-3, "shape {shape:?}: {} vs {logdet}", -out.delta_logp);
        if shape == [2, 1, 1] {
            let model = gaussian_logp(&out.z, 1.0).unwrap() - out.delta_logp;
            let brute = gaussian_logp(&out.z, 1.0).unwrap() + logdet;
            assert!((model - brute).abs() < 1e-4);
        }
    }
}

#[test]
fn exact_trace_equals_finite_difference_diagonal() {
    let shape = [2, 3, 3];
    let b = random_block(shape, None, 1, 5, IntegrationSpec::fixed(Method::Euler, 1));
    let v = sample(&shape, 6);
    let trace = exact_trace(&b, &v);

    let h = 1e-5;
    let mut fd = 0.0;
    for i in 0..v.len() {
        let mut vp = v.clone();
        let mut vm = v.clone();
        vp.data_mut()[i] += h;
        vm.data_mut()[i] -= h;
        let fp = stage_jvps(&b, &vp, &[]).0;
        let fm = stage_jvps(&b, &vm, &[]).0;
        fd += (fp.data()[i] - fm.data()[i]) / (2.0 * h);
    }
    assert!((trace - fd).abs() < 1e-8, "{trace} vs {fd}");
}

#[test]
fn hutchinson_mean_within_three_standard_errors() {
    let shape = [2, 4, 4];
    let b = random_block(shape, None, 1, 7, IntegrationSpec::fixed(Method::Euler, 1));
    let v = sample(&shape, 8);
    let jac = dense_dynamics_jacobian(&b, &v);
    let exact: f64 = (0..jac.len()).map(|i| jac[i][i]).sum();
    for noise in [NoiseDist::Gaussian, NoiseDist::Rademacher] {
        let (mean, se) = mean_se(&hutchinson_samples(&b, &v, noise, 256, 9));
        assert!((mean - exact).abs() < 3.0 * se, "{noise:?}: {mean} vs {exact}");
    }
}

#[test]
fn rademacher_variance_never_exceeds_gaussian() {
    // Var_G(uᵀJu) = 2‖A‖², Var_R(uᵀJu) = 2(‖A‖² − Σ A_ii²) with A = (J + Jᵀ)/2.
    for seed in 0..20 {
        let shape = [1, 2, 3];
        let b = random_block(shape, None, 1, 100 + seed, IntegrationSpec::fixed(Method::Euler, 1));
        let v = sample(&shape, 200 + seed);
        let jac = dense_dynamics_jacobian(&b, &v);
        let n = jac.len();
        let mut fro = 0.0;
        let mut diag = 0.0;
        for i in 0..n {
            for j in 0..n {
                let a = 0.5 * (jac[i][j] + jac[j][i]);
                fro += a * a;
                if i == j {
                    diag += a * a;
                }
            }
        }
        let (var_g, var_r) = (2.0 * fro, 2.0 * (fro - diag));
        assert!(var_r <= var_g + 1e-15);

        // empirical check of the analytic Gaussian variance on this net
        if seed == 0 {
            let s = hutchinson_samples(&b, &v, NoiseDist::Gaussian, 4000, 1);
            let m = s.iter().sum::<f64>() / s.len() as f64;
            let emp = s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64;
            assert!((emp - var_g).abs() < 0.15 * var_g, "{emp} vs {var_g}");
        }
    }
}

#[test]
fn inverse_round_trip_and_logp_cancellation() {
    let shape = [2, 4, 4];
    let cond = [3, 4, 4];
    let b = random_block(shape, Some(cond), 2, 11, IntegrationSpec::adaptive(1e-7, 1e-7));
    let x = sample(&shape, 12);
    let c = sample(&cond, 13);
    let fwd = b.forward_logp(&x, Some(&c), &mut seeded(0)).unwrap();
    let back = b.inverse(&fwd.z, Some(&c)).unwrap();
    assert!(back.max_abs_diff(&x).unwrap() < 1e-3);
    let z = sample(&shape, 14);
    let x2 = b.inverse(&z, Some(&c)).unwrap();
    let z2 = b.forward_logp(&x2, Some(&c), &mut seeded(0)).unwrap().z;
    assert!(z2.max_abs_diff(&z).unwrap() < 1e-3);

    let (_, rev) = b.inverse_logp(&fwd.z, Some(&c), &mut seeded(0)).unwrap();
    assert!((fwd.delta_logp + rev).abs() < 1e-4, "{} + {rev}", fwd.delta_logp);
}

#[test]
fn regularizers_are_nonnegative_and_vanish_only_for_zero_dynamics() {
    let shape = [1, 2, 2];
    let spec = IntegrationSpec::fixed(Method::Rk4, 4);
    let x = sample(&shape, 3);
    let b = random_block(shape, None, 1, 4, spec);
    let out = b.forward_logp(&x, None, &mut seeded(0)).unwrap();
    assert!(out.ke > 0.0 && out.jn > 0.0);
    let mut rng = seeded(1);
    let zero = CnfBlock::new(shape, None, 4, 1, spec, TraceEstimator::exact(), &mut rng).unwrap();
    let out = zero.forward_logp(&x, None, &mut seeded(0)).unwrap();
    assert_eq!((out.ke, out.jn), (0.0, 0.0));
}

/// Scalar objective of one block on the tape, with its parameter leaves.
fn taped_loss(b: &CnfBlock, params: &[Tensor], x: &Tensor, c: &Tensor, tape: &Tape) -> (f64, Vec<Tensor>) {
    let leaves: Vec<_> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let xv = tape.constant(x.clone());
    let cv = tape.constant(c.clone());
    let est = TraceEstimator::hutchinson(NoiseDist::Gaussian, 1);
    let out = b
        .flow_on(tape, &leaves, xv, Some(&cv), &b.spec, &est, Direction::Forward, Tracking::Full, &mut seeded(42))
        .unwrap();
    let lp = gaussian_logp_on(tape, &out.z, 1.0).unwrap();
    let nll = tape.sub(&out.delta_logp, &lp).unwrap();
    let loss = tape.axpy(&tape.axpy(&nll, 0.1, &out.ke).unwrap(), 0.1, &out.jn).unwrap();
    let value = tape.value(&loss).item().unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = leaves.iter().zip(params).map(|(l, p)| grads.get_or_zeros(*l, p.shape())).collect();
    (value, g)
}

#[test]
fn tape_gradient_matches_finite_differences() {
    let shape = [1, 2, 2];
    let cond = [1, 2, 2];
    let b = random_block(shape, Some(cond), 1, 21, IntegrationSpec::fixed(Method::Rk4, 3));
    let x = sample(&shape, 22);
    let c = sample(&cond, 23);
    let params = b.net.params().to_vec();
    let (_, grads) = taped_loss(&b, &params, &x, &c, &Tape::new());
    let h = 1e-6;
    let mut checked = 0;
    for (pi, p) in params.iter().enumerate() {
        for idx in [0, p.len() / 2, p.len() - 1] {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[pi].data_mut()[idx] += h;
            minus[pi].data_mut()[idx] -= h;
            let fp = taped_loss(&b, &plus, &x, &c, &Tape::new()).0;
            let fm = taped_loss(&b, &minus, &x, &c, &Tape::new()).0;
            let fd = (fp - fm) / (2.0 * h);
            let an = grads[pi].data()[idx];
            assert!((fd - an).abs() < 1e-5 * (1.0 + an.abs()), "param {pi}[{idx}]: fd {fd} vs tape {an}");
            checked += 1;
        }
    }
    assert!(checked >= 24);
}
