//! Fixed-step and adaptive integration of the augmented flow state.
//!
//! The state carries the flow value `v` plus three scalar accumulators: the
//! log-density change (`d dlogp/dt = -trace`), the kinetic energy and the
//! Jacobian-norm penalty. All arithmetic goes through [`Ops`], so integrating
//! on a [`crate::tensor::Tape`] unrolls the solver and gradients are those of
//! the discrete computation.

use crate::error::{Error, Result};
use crate::tensor::{Eager, Ops, Tensor};

/// Any state element above this magnitude aborts the solve.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

const MAX_ADAPTIVE_STEPS: usize = 100_000;
const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    Euler,
    Rk4,
    AdaptiveRk45,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
            Method::AdaptiveRk45 => "adaptive_rk45",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "euler" => Some(Method::Euler),
            "rk4" => Some(Method::Rk4),
            "adaptive_rk45" => Some(Method::AdaptiveRk45),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegrationSpec {
    pub t0: f64,
    pub t1: f64,
    pub method: Method,
    /// Step count for the fixed-step methods.
    pub steps: usize,
    /// Tolerances for the adaptive method.
    pub rtol: f64,
    pub atol: f64,
}

impl IntegrationSpec {
    pub fn fixed(method: Method, steps: usize) -> Self {
        Self {
            t0: 0.0,
            t1: 1.0,
            method,
            steps,
            rtol: 1e-5,
            atol: 1e-5,
        }
    }

    pub fn adaptive(rtol: f64, atol: f64) -> Self {
        Self {
            t0: 0.0,
            t1: 1.0,
            method: Method::AdaptiveRk45,
            steps: 1,
            rtol,
            atol,
        }
    }

    /// rk4 with 8 steps.
    pub fn training_default() -> Self {
        Self::fixed(Method::Rk4, 8)
    }

    /// Dormand-Prince with rtol = atol = 1e-5.
    pub fn evaluation_default() -> Self {
        Self::adaptive(1e-5, 1e-5)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0 < self.t1) {
            return Err(Error::contract(format!(
                "integration interval [{}, {}] is empty",
                self.t0, self.t1
            )));
        }
        match self.method {
            Method::AdaptiveRk45 if !(self.rtol > 0.0 && self.atol > 0.0) => Err(Error::contract(
                "adaptive tolerances must be positive",
            )),
            Method::Euler | Method::Rk4 if self.steps == 0 => {
                Err(Error::contract("fixed-step solver needs at least one step"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// t0 -> t1 (data to noise)
    Forward,
    /// t1 -> t0 (noise to data)
    Reverse,
}

#[derive(Clone, Debug)]
pub struct AugmentedState<V> {
    pub v: V,
    /// Accumulated `-∫ trace dt`.
    pub dlogp: V,
    pub ke: V,
    pub jn: V,
}

impl<V> AugmentedState<V> {
    /// State `v` with zeroed accumulators.
    pub fn start<B: Ops<V = V>>(b: &B, v: V) -> Self {
        Self {
            v,
            dlogp: b.constant(Tensor::scalar(0.0)),
            ke: b.constant(Tensor::scalar(0.0)),
            jn: b.constant(Tensor::scalar(0.0)),
        }
    }
}

/// One evaluation of the dynamics. Accumulator rates left as `None` contribute
/// nothing, which lets pure sampling skip the trace computation.
#[derive(Clone, Debug)]
pub struct Derivative<V> {
    pub dv: V,
    pub trace: Option<V>,
    pub ke: Option<V>,
    pub jn: Option<V>,
}

impl<V> Derivative<V> {
    pub fn value_only(dv: V) -> Self {
        Self {
            dv,
            trace: None,
            ke: None,
            jn: None,
        }
    }
}

/// `state + h * Σ coef_i * k_i`, applied component by component.
fn combine<B: Ops>(
    b: &B,
    state: &AugmentedState<B::V>,
    h: f64,
    terms: &[(f64, &Derivative<B::V>)],
) -> Result<AugmentedState<B::V>> {
    let mut out = state.clone();
    for &(coef, k) in terms {
        if coef == 0.0 {
            continue;
        }
        let w = h * coef;
        out.v = b.axpy(&out.v, w, &k.dv)?;
        if let Some(tr) = &k.trace {
            out.dlogp = b.axpy(&out.dlogp, -w, tr)?;
        }
        if let Some(ke) = &k.ke {
            out.ke = b.axpy(&out.ke, w, ke)?;
        }
        if let Some(jn) = &k.jn {
            out.jn = b.axpy(&out.jn, w, jn)?;
        }
    }
    Ok(out)
}

fn check_bounded<B: Ops>(b: &B, s: &AugmentedState<B::V>, step: usize, time: f64) -> Result<()> {
    let v = b.value(&s.v);
    let ok = v.is_finite()
        && v.max_abs() <= DIVERGENCE_LIMIT
        && [&s.dlogp, &s.ke, &s.jn]
            .iter()
            .all(|x| b.value(x).is_finite());
    if ok {
        Ok(())
    } else {
        Err(Error::Divergence { step, time })
    }
}

/// Integrates `state0` across `spec`'s interval in the given direction.
pub fn integrate<B, F>(
    b: &B,
    mut dynamics: F,
    state0: AugmentedState<B::V>,
    spec: &IntegrationSpec,
    direction: Direction,
) -> Result<AugmentedState<B::V>>
where
    B: Ops,
    F: FnMut(&B::V, f64) -> Result<Derivative<B::V>>,
{
    spec.validate()?;
    let (start, end) = match direction {
        Direction::Forward => (spec.t0, spec.t1),
        Direction::Reverse => (spec.t1, spec.t0),
    };
    match spec.method {
        Method::Euler | Method::Rk4 => {
            let h = (end - start) / spec.steps as f64;
            let mut state = state0;
            for step in 0..spec.steps {
                let t = start + step as f64 * h;
                state = match spec.method {
                    Method::Euler => {
                        let k1 = dynamics(&state.v, t)?;
                        combine(b, &state, h, &[(1.0, &k1)])?
                    }
                    _ => rk4_step(b, &mut dynamics, &state, t, h)?,
                };
                check_bounded(b, &state, step, t + h)?;
            }
            Ok(state)
        }
        Method::AdaptiveRk45 => adaptive(b, &mut dynamics, state0, start, end, spec.rtol, spec.atol),
    }
}

fn rk4_step<B, F>(b: &B, f: &mut F, s: &AugmentedState<B::V>, t: f64, h: f64) -> Result<AugmentedState<B::V>>
where
    B: Ops,
    F: FnMut(&B::V, f64) -> Result<Derivative<B::V>>,
{
    let k1 = f(&s.v, t)?;
    let v2 = b.axpy(&s.v, 0.5 * h, &k1.dv)?;
    let k2 = f(&v2, t + 0.5 * h)?;
    let v3 = b.axpy(&s.v, 0.5 * h, &k2.dv)?;
    let k3 = f(&v3, t + 0.5 * h)?;
    let v4 = b.axpy(&s.v, h, &k3.dv)?;
    let k4 = f(&v4, t + h)?;
    combine(
        b,
        s,
        h,
        &[(1.0 / 6.0, &k1), (1.0 / 3.0, &k2), (1.0 / 3.0, &k3), (1.0 / 6.0, &k4)],
    )
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// fifth-order weights minus embedded fourth-order weights
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn adaptive<B, F>(
    b: &B,
    f: &mut F,
    state0: AugmentedState<B::V>,
    start: f64,
    end: f64,
    rtol: f64,
    atol: f64,
) -> Result<AugmentedState<B::V>>
where
    B: Ops,
    F: FnMut(&B::V, f64) -> Result<Derivative<B::V>>,
{
    let span = end - start;
    let sign = span.signum();
    let mut h = 0.1 * span;
    let mut t = start;
    let mut state = state0;
    let mut k1 = f(&state.v, t)?;
    let mut steps = 0;

    while (end - t) * sign > 1e-12 * span.abs() {
        if steps >= MAX_ADAPTIVE_STEPS {
            return Err(Error::Divergence { step: steps, time: t });
        }
        if (t + h - end) * sign > 0.0 {
            h = end - t;
        }
        let mut ks: Vec<Derivative<B::V>> = vec![k1.clone()];
        for i in 1..7 {
            let terms: Vec<(f64, &Derivative<B::V>)> = A[i].iter().copied().zip(ks.iter()).collect();
            let stage = combine(b, &state, h, &terms)?;
            let k = f(&stage.v, t + C[i] * h)?;
            if i == 6 {
                // the last stage is evaluated at the candidate solution itself
                let candidate = stage;
                ks.push(k);
                let err = error_norm(b, &state, &candidate, &ks, h, rtol, atol);
                if !err.is_finite() {
                    return Err(Error::Divergence { step: steps, time: t });
                }
                if err <= 1.0 {
                    t = if (end - (t + h)) * sign <= 1e-12 * span.abs() { end } else { t + h };
                    state = candidate;
                    check_bounded(b, &state, steps, t)?;
                    k1 = ks.pop().expect("seven stages");
                    let factor = (SAFETY * err.max(1e-10).powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR);
                    h *= factor;
                } else {
                    let factor = (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
                    h *= factor;
                }
                steps += 1;
                break;
            }
            ks.push(k);
        }
    }
    Ok(state)
}

/// RMS of the scaled local error estimate over all state components.
fn error_norm<B: Ops>(
    b: &B,
    old: &AugmentedState<B::V>,
    new: &AugmentedState<B::V>,
    ks: &[Derivative<B::V>],
    h: f64,
    rtol: f64,
    atol: f64,
) -> f64 {
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut add = |y0: &Tensor, y1: &Tensor, rates: Vec<Option<std::sync::Arc<Tensor>>>, sign: f64| {
        for i in 0..y0.len() {
            let mut e = 0.0;
            for (coef, r) in E.iter().zip(&rates) {
                if let Some(r) = r {
                    e += coef * r.data()[i];
                }
            }
            let e = sign * h * e;
            let sc = atol + rtol * y0.data()[i].abs().max(y1.data()[i].abs());
            sq += (e / sc) * (e / sc);
            count += 1;
        }
    };
    add(
        &b.value(&old.v),
        &b.value(&new.v),
        ks.iter().map(|k| Some(b.value(&k.dv))).collect(),
        1.0,
    );
    let scalars: [(&B::V, &B::V, fn(&Derivative<B::V>) -> Option<&B::V>, f64); 3] = [
        (&old.dlogp, &new.dlogp, |k| k.trace.as_ref(), -1.0),
        (&old.ke, &new.ke, |k| k.ke.as_ref(), 1.0),
        (&old.jn, &new.jn, |k| k.jn.as_ref(), 1.0),
    ];
    for (y0, y1, pick, sign) in scalars {
        let rates: Vec<_> = ks.iter().map(|k| pick(k).map(|r| b.value(r))).collect();
        if rates.iter().all(|r| r.is_none()) {
            continue;
        }
        add(&b.value(y0), &b.value(y1), rates, sign);
    }
    (sq / count.max(1) as f64).sqrt()
}

/// `‖reverse(forward(v0)) − v0‖∞` for an eager dynamics function.
pub fn roundtrip_error<F>(dynamics: F, v0: &Tensor, spec: &IntegrationSpec) -> Result<f64>
where
    F: FnMut(&<Eager as Ops>::V, f64) -> Result<Derivative<<Eager as Ops>::V>>,
{
    let b = Eager;
    let mut dynamics = dynamics;
    let start = AugmentedState::start(&b, b.constant(v0.clone()));
    let fwd = integrate(&b, &mut dynamics, start, spec, Direction::Forward)?;
    let back = integrate(
        &b,
        &mut dynamics,
        AugmentedState::start(&b, fwd.v),
        spec,
        Direction::Reverse,
    )?;
    back.v.max_abs_diff(v0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn linear(rate: f64) -> impl FnMut(&Arc<Tensor>, f64) -> Result<Derivative<Arc<Tensor>>> {
        move |v, _t| Ok(Derivative::value_only(Eager.scale(v, rate)))
    }

    fn solve(spec: IntegrationSpec, v0: f64, rate: f64) -> f64 {
        let b = Eager;
        let s = AugmentedState::start(&b, b.constant(Tensor::from_vec(vec![v0])));
        integrate(&b, linear(rate), s, &spec, Direction::Forward).unwrap().v.data()[0]
    }

    #[test]
    fn zero_dynamics_is_identity() {
        let b = Eager;
        let x = Tensor::from_vec(vec![0.3, -1.2]);
        for spec in [
            IntegrationSpec::fixed(Method::Euler, 3),
            IntegrationSpec::fixed(Method::Rk4, 4),
            IntegrationSpec::evaluation_default(),
        ] {
            let s = AugmentedState::start(&b, b.constant(x.clone()));
            let out = integrate(
                &b,
                |v: &Arc<Tensor>, _| {
                    Ok(Derivative {
                        dv: Arc::new(Tensor::zeros(v.shape())),
                        trace: Some(Arc::new(Tensor::scalar(0.0))),
                        ke: None,
                        jn: None,
                    })
                },
                s,
                &spec,
                Direction::Forward,
            )
            .unwrap();
            assert_eq!(*out.v, x);
            assert_eq!(out.dlogp.item().unwrap(), 0.0);
        }
    }

    #[test]
    fn single_euler_step_doubles_exponential() {
        assert_eq!(solve(IntegrationSpec::fixed(Method::Euler, 1), 0.75, 1.0), 1.5);
    }

    #[test]
    fn rk4_hits_e() {
        let r = solve(IntegrationSpec::fixed(Method::Rk4, 100), 1.0, 1.0);
        assert!((r - std::f64::consts::E).abs() < 1e-6);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let e = std::f64::consts::E;
        let coarse = (solve(IntegrationSpec::fixed(Method::Rk4, 4), 1.0, 1.0) - e).abs();
        let fine = (solve(IntegrationSpec::fixed(Method::Rk4, 8), 1.0, 1.0) - e).abs();
        assert!(coarse / fine >= 8.0, "ratio {}", coarse / fine);
    }

    #[test]
    fn adaptive_matches_fine_rk4() {
        let reference = solve(IntegrationSpec::fixed(Method::Rk4, 1000), 0.7, 1.3);
        let spec = IntegrationSpec::adaptive(1e-6, 1e-6);
        let got = solve(spec, 0.7, 1.3);
        assert!((got - reference).abs() <= 10.0 * 1e-6 * reference.abs());
    }

    #[test]
    fn reverse_euler_subtracts() {
        let b = Eager;
        let s = AugmentedState::start(&b, b.constant(Tensor::from_vec(vec![3.0])));
        let out = integrate(&b, linear(0.5), s, &IntegrationSpec::fixed(Method::Euler, 1), Direction::Reverse).unwrap();
        assert_eq!(out.v.data()[0], 3.0 - 0.5 * 3.0);
    }

    #[test]
    fn divergence_reports_step() {
        let b = Eager;
        let s = AugmentedState::start(&b, b.constant(Tensor::from_vec(vec![1.0])));
        let err = integrate(&b, linear(40.0), s, &IntegrationSpec::fixed(Method::Euler, 10), Direction::Forward)
            .unwrap_err();
        match err {
            Error::Divergence { step, .. } => assert_eq!(step, 8),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn linear_roundtrip_is_tight() {
        let v0 = Tensor::from_vec(vec![0.4, -0.9, 1.7]);
        let err = roundtrip_error(linear(0.8), &v0, &IntegrationSpec::fixed(Method::Rk4, 64)).unwrap();
        assert!(err < 1e-8, "{err}");
        let zero = roundtrip_error(linear(0.0), &v0, &IntegrationSpec::fixed(Method::Rk4, 2)).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(IntegrationSpec::fixed(Method::Rk4, 0).validate().is_err());
        assert!(IntegrationSpec::adaptive(0.0, 1e-5).validate().is_err());
        let mut s = IntegrationSpec::training_default();
        s.t1 = s.t0;
        assert!(s.validate().is_err());
    }
}
