//! Stochastic (transport-noise) rotating shallow water on the C-grid.
//!
//! Momentum: `du = [-(u.grad)u - (f/Ro) z x u - Fr^-2 grad eta + nu lap u] dt
//!                 - sum_n [(xi_n.grad)u + (grad xi_n).u + (f/Ro) z x xi_n] o dW^n`
//! Height:   `deta = -div(eta u) dt - sum_n div(eta xi_n) o dW^n`
//!
//! Momentum is discretised in vector-invariant form, `(u.grad)u = zeta z x u
//! + grad |u|^2/2`, with centred stencils and the energy-conserving average of
//! the potential-vorticity flux; the noise terms use the same stencils.
//!
//! The Stratonovich integral is handled by classical RK4 with the Brownian
//! increment frozen across the four stages.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, StaggeredState};
use crate::noise::NoiseBasis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    S,
    M,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub rossby: f64,
    pub froude: f64,
    pub coriolis: f64,
    pub viscosity: f64,
    pub dt: f64,
}

impl ModelParams {
    pub fn preset(regime: Regime) -> Self {
        let (rossby, froude, dt) = match regime {
            Regime::S => (0.9, 0.3, 1e-3),
            Regime::M => (0.05, 0.05, 1e-4),
        };
        Self { rossby, froude, coriolis: 1.0, viscosity: 1e-5, dt }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rossby > 0.0
            && self.froude > 0.0
            && self.coriolis.is_finite()
            && self.viscosity >= 0.0
            && self.dt > 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("model parameters {self:?}")));
        }
        Ok(())
    }

    fn rotation(&self) -> f64 {
        self.coriolis / self.rossby
    }
}

/// Grid, parameters and (optional) transport noise: everything needed to
/// advance a state.
#[derive(Debug, Clone)]
pub struct Model {
    pub grid: GridSpec,
    pub params: ModelParams,
    pub noise: Option<NoiseBasis>,
}

/// Flat-index helper over `(d + 2)^2` row-major arrays; `i` is the slow axis.
#[derive(Clone, Copy)]
struct Ix {
    n: usize,
}

impl Ix {
    #[inline(always)]
    fn at(self, i: usize, j: usize) -> usize {
        i * self.n + j
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn check_finite(s: &StaggeredState, what: &'static str) -> Result<()> {
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Potential vorticity `(zeta + f/Ro) / h` at cell corners `(i dx, j dx)`,
/// `i, j` in `0..=d`.
fn corner_pv(u: &[f64], v: &[f64], h: &[f64], d: usize, f0: f64) -> Vec<f64> {
    let ix = Ix { n: d + 2 };
    let invdx = d as f64;
    let mut q = vec![0.0; (d + 2) * (d + 2)];
    for i in 0..=d {
        for j in 0..=d {
            let zeta = (v[ix.at(i + 1, j)] - v[ix.at(i, j)] - u[ix.at(i, j + 1)] + u[ix.at(i, j)]) * invdx;
            let hq = 0.25 * (h[ix.at(i, j)] + h[ix.at(i + 1, j)] + h[ix.at(i, j + 1)] + h[ix.at(i + 1, j + 1)]);
            q[ix.at(i, j)] = (zeta + f0) / hq;
        }
    }
    q
}

/// Vector-invariant momentum rate for a transporting field `(a, b)`:
/// `q (h b, -h a)` with the energy-conserving corner average, minus the
/// gradient of the centred scalar `bern`. Interior only; adds into `du, dv`.
fn momentum(a: &[f64], b: &[f64], h: &[f64], q: &[f64], bern: &[f64], d: usize, du: &mut [f64], dv: &mut [f64]) {
    let ix = Ix { n: d + 2 };
    let invdx = d as f64;
    // Mass fluxes on u- and v-points.
    let flux_u = |i: usize, j: usize| 0.5 * (h[ix.at(i, j)] + h[ix.at(i + 1, j)]) * a[ix.at(i, j)];
    let flux_v = |i: usize, j: usize| 0.5 * (h[ix.at(i, j)] + h[ix.at(i, j + 1)]) * b[ix.at(i, j)];
    for i in 1..=d {
        for j in 1..=d {
            let c = ix.at(i, j);
            let rot = 0.25
                * (q[c] * (flux_v(i, j) + flux_v(i + 1, j))
                    + q[ix.at(i, j - 1)] * (flux_v(i, j - 1) + flux_v(i + 1, j - 1)));
            du[c] += rot - (bern[ix.at(i + 1, j)] - bern[c]) * invdx;
        }
        for j in 1..d {
            let c = ix.at(i, j);
            let rot = 0.25
                * (q[c] * (flux_u(i, j) + flux_u(i, j + 1))
                    + q[ix.at(i - 1, j)] * (flux_u(i - 1, j) + flux_u(i - 1, j + 1)));
            dv[c] += -rot - (bern[ix.at(i, j + 1)] - bern[c]) * invdx;
        }
    }
}

/// Centred `0.5 (a.u)` averaged from the staggered points, for `i` in
/// `1..=d + 1`, `j` in `1..=d`; `a = u` gives the kinetic energy.
fn centred_dot(a: &[f64], b: &[f64], u: &[f64], v: &[f64], d: usize, out: &mut [f64]) {
    let ix = Ix { n: d + 2 };
    for i in 1..=d + 1 {
        for j in 1..=d {
            let (c, w, so) = (ix.at(i, j), ix.at(i - 1, j), ix.at(i, j - 1));
            out[c] += 0.5 * (a[c] * u[c] + a[w] * u[w] + b[c] * v[c] + b[so] * v[so]);
        }
    }
}

/// Drift rate; ghosts and wall values of the result are zero.
fn drift(s: &StaggeredState, p: &ModelParams) -> StaggeredState {
    let d = s.d();
    let ix = Ix { n: d + 2 };
    let invdx2 = (d * d) as f64;
    let (g, nu) = (1.0 / (p.froude * p.froude), p.viscosity);
    let (u, v, h) = (slice(&s.u), slice(&s.v), slice(&s.eta));

    let q = corner_pv(u, v, h, d, p.rotation());
    let mut bern = vec![0.0; (d + 2) * (d + 2)];
    centred_dot(u, v, u, v, d, &mut bern);
    for i in 1..=d + 1 {
        for j in 1..=d {
            let c = ix.at(i, j);
            bern[c] = 0.5 * bern[c] + g * h[c];
        }
    }

    let mut out = StaggeredState::zeros(&GridSpec::new(d).expect("d >= 2"));
    let StaggeredState { u: ou, v: ov, eta: oe } = &mut out;
    let (du, dv) = (slice_mut(ou), slice_mut(ov));
    momentum(u, v, h, &q, &bern, d, du, dv);
    if nu != 0.0 {
        let lap = |a: &[f64], i: usize, j: usize| {
            (a[ix.at(i + 1, j)] + a[ix.at(i - 1, j)] + a[ix.at(i, j + 1)] + a[ix.at(i, j - 1)] - 4.0 * a[ix.at(i, j)])
                * invdx2
        };
        for i in 1..=d {
            for j in 1..=d {
                du[ix.at(i, j)] += nu * lap(u, i, j);
            }
            for j in 1..d {
                dv[ix.at(i, j)] += nu * lap(v, i, j);
            }
        }
    }
    flux_divergence(u, v, h, d, -1.0, slice_mut(oe));
    out
}

/// `out += scale * div(eta (a, b))` in flux form at cell centres.
fn flux_divergence(a: &[f64], b: &[f64], h: &[f64], d: usize, scale: f64, out: &mut [f64]) {
    let ix = Ix { n: d + 2 };
    let k = scale * d as f64 * 0.5;
    for i in 1..=d {
        for j in 1..=d {
            let c = ix.at(i, j);
            let (e, w, n, so) = (ix.at(i + 1, j), ix.at(i - 1, j), ix.at(i, j + 1), ix.at(i, j - 1));
            let fe = a[c] * (h[c] + h[e]);
            let fw = a[w] * (h[w] + h[c]);
            let gn = b[c] * (h[c] + h[n]);
            let gs = b[so] * (h[so] + h[c]);
            out[c] += k * ((fe - fw) + (gn - gs));
        }
    }
}

/// Stochastic increment for the combined noise field `(xu, xv) = sum xi_n dW_n`,
/// using `(xi.grad)u + (grad xi).u = zeta z x xi + grad(xi.u)`.
fn transport(s: &StaggeredState, xu: &Array2<f64>, xv: &Array2<f64>, p: &ModelParams) -> StaggeredState {
    let d = s.d();
    let (u, v, h) = (slice(&s.u), slice(&s.v), slice(&s.eta));
    let (a, b) = (slice(xu), slice(xv));

    let q = corner_pv(u, v, h, d, p.rotation());
    let mut bern = vec![0.0; (d + 2) * (d + 2)];
    centred_dot(a, b, u, v, d, &mut bern);

    let mut out = StaggeredState::zeros(&GridSpec::new(d).expect("d >= 2"));
    let StaggeredState { u: ou, v: ov, eta: oe } = &mut out;
    momentum(a, b, h, &q, &bern, d, slice_mut(ou), slice_mut(ov));
    flux_divergence(a, b, h, d, -1.0, slice_mut(oe));
    out
}

/// Drift rate `A(X)` of the deterministic part.
pub fn deterministic_tendency(s: &StaggeredState, params: &ModelParams) -> Result<StaggeredState> {
    check_finite(s, "tendency input")?;
    Ok(drift(s, params))
}

/// Stochastic increment `B(X) dW` for one set of Brownian increments.
pub fn stochastic_tendency(s: &StaggeredState, basis: &NoiseBasis, dw: &[f64], params: &ModelParams) -> Result<StaggeredState> {
    check_finite(s, "tendency input")?;
    let (xu, xv) = basis.combine(dw)?;
    Ok(transport(s, &xu, &xv, params))
}

/// A vector space element RK4 can combine.
pub trait RkState: Clone {
    /// `self + a * k`, followed by any projection (e.g. boundary conditions).
    fn add_scaled(&self, a: f64, k: &Self) -> Self;
}

impl RkState for f64 {
    fn add_scaled(&self, a: f64, k: &Self) -> Self {
        self + a * k
    }
}

impl RkState for StaggeredState {
    fn add_scaled(&self, a: f64, k: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(a, k);
        out.apply_boundary_conditions();
        out
    }
}

/// Classical RK4 where `incr(x)` returns the full stage increment (rate * dt
/// plus any frozen stochastic part).
pub fn rk4<S: RkState>(x: &S, mut incr: impl FnMut(&S) -> Result<S>) -> Result<S> {
    let k1 = incr(x)?;
    let k2 = incr(&x.add_scaled(0.5, &k1))?;
    let k3 = incr(&x.add_scaled(0.5, &k2))?;
    let k4 = incr(&x.add_scaled(1.0, &k3))?;
    let y = x
        .add_scaled(1.0 / 6.0, &k1)
        .add_scaled(1.0 / 3.0, &k2)
        .add_scaled(1.0 / 3.0, &k3)
        .add_scaled(1.0 / 6.0, &k4);
    Ok(y)
}

impl Model {
    pub fn new(grid: GridSpec, params: ModelParams, noise: Option<NoiseBasis>) -> Result<Self> {
        params.validate()?;
        Ok(Self { grid, params, noise })
    }

    pub fn n_noise(&self) -> usize {
        self.noise.as_ref().map_or(0, NoiseBasis::n_modes)
    }

    /// One step with the given increments (empty when the model is noise-free).
    pub fn step_with(&self, s: &StaggeredState, dw: &[f64]) -> Result<StaggeredState> {
        let dt = self.params.dt;
        let combined = match &self.noise {
            Some(b) if dw.iter().any(|&w| w != 0.0) => Some(b.combine(dw)?),
            Some(b) => {
                if dw.len() != b.n_modes() {
                    return Err(Error::NoiseLength { expected: b.n_modes(), got: dw.len() });
                }
                None
            }
            None if dw.is_empty() => None,
            None => return Err(Error::NoiseLength { expected: 0, got: dw.len() }),
        };
        let y = rk4(s, |x| {
            let mut k = drift(x, &self.params);
            for a in [&mut k.u, &mut k.v, &mut k.eta] {
                *a *= dt;
            }
            if let Some((xu, xv)) = &combined {
                k.axpy(1.0, &transport(x, xu, xv, &self.params));
            }
            Ok(k)
        })?;
        check_finite(&y, "rk4 step")?;
        Ok(y)
    }

    /// One step drawing fresh increments; returns them for path recording.
    pub fn step<R: Rng + ?Sized>(&self, s: &StaggeredState, rng: &mut R) -> Result<(StaggeredState, Vec<f64>)> {
        let dw = match &self.noise {
            Some(b) => b.sample_increments(self.params.dt, rng),
            None => Vec::new(),
        };
        Ok((self.step_with(s, &dw)?, dw))
    }

    /// `n_steps` steps; blow-ups report the (1-based) failing step.
    pub fn propagate<R: Rng + ?Sized>(
        &self,
        s: &StaggeredState,
        n_steps: usize,
        rng: &mut R,
        mut path: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<StaggeredState> {
        let mut x = s.clone();
        for step in 1..=n_steps {
            let (y, dw) = self.step(&x, rng).map_err(|e| blowup(e, step))?;
            if let Some(p) = path.as_deref_mut() {
                p.push(dw);
            }
            x = y;
        }
        Ok(x)
    }

    /// Replay a recorded (or blended) increment path.
    pub fn propagate_path(&self, s: &StaggeredState, path: &[Vec<f64>]) -> Result<StaggeredState> {
        let mut x = s.clone();
        for (step, dw) in path.iter().enumerate() {
            x = self.step_with(&x, dw).map_err(|e| blowup(e, step + 1))?;
        }
        Ok(x)
    }
}

fn blowup(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Blowup { step },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::ModeCoefficients;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn grid(d: usize) -> GridSpec {
        GridSpec::new(d).unwrap()
    }

    fn bumpy(g: &GridSpec) -> StaggeredState {
        let mut s = StaggeredState::zeros(g);
        for i in 1..=g.d() {
            for j in 1..=g.d() {
                let (x, y) = g.center(i, j);
                s.eta[[i, j]] = 1.0 + 0.05 * (2.0 * PI * x).sin() * (PI * y).cos();
                let (x, y) = g.u_point(i, j);
                s.u[[i, j]] = 0.1 * (2.0 * PI * x).cos() * (2.0 * PI * y).cos();
                let (x, y) = g.v_point(i, j);
                s.v[[i, j]] = 0.1 * (2.0 * PI * x).sin() * (PI * y).sin();
            }
        }
        s.apply_boundary_conditions();
        s
    }

    #[test]
    fn rest_state_has_zero_tendency() {
        let g = grid(16);
        let s = StaggeredState::rest(&g, 1.3);
        let t = deterministic_tendency(&s, &ModelParams::preset(Regime::S)).unwrap();
        assert!(t.u.iter().chain(&t.v).chain(&t.eta).all(|&x| x == 0.0));
    }

    #[test]
    fn pressure_gradient_converges_at_second_order() {
        let p = ModelParams { viscosity: 0.0, ..ModelParams::preset(Regime::S) };
        let g2 = 1.0 / (p.froude * p.froude);
        let err = |d: usize| {
            let g = grid(d);
            let mut s = StaggeredState::zeros(&g);
            for i in 1..=d {
                for j in 1..=d {
                    s.eta[[i, j]] = (2.0 * PI * g.center(i, j).0).sin();
                }
            }
            s.apply_boundary_conditions();
            let t = deterministic_tendency(&s, &p).unwrap();
            let mut e: f64 = 0.0;
            for i in 1..=d {
                for j in 1..=d {
                    let x = g.u_point(i, j).0;
                    e = e.max((t.u[[i, j]] + g2 * 2.0 * PI * (2.0 * PI * x).cos()).abs());
                    assert_eq!(t.eta[[i, j]], 0.0);
                }
            }
            e
        };
        let ratio = err(32) / err(64);
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn zero_increments_give_zero_transport() {
        let g = grid(8);
        let b = NoiseBasis::random(&g, 5, 2.0, 0.1, &mut stream(1, &[])).unwrap();
        let t = stochastic_tendency(&bumpy(&g), &b, &[0.0; 5], &ModelParams::preset(Regime::S)).unwrap();
        assert!(t.u.iter().chain(&t.v).chain(&t.eta).all(|&x| x == 0.0));
    }

    #[test]
    fn height_transport_of_uniform_layer_is_divergence() {
        let g = grid(16);
        let c = ModeCoefficients { alpha: 0.3, beta: 0.7, gamma: 0.2, delta: 0.9 };
        let b = NoiseBasis::from_coefficients(&g, 0.1, 2.0, vec![c]).unwrap();
        let hgt = 1.7;
        let dw = 0.03;
        let t = stochastic_tendency(&StaggeredState::rest(&g, hgt), &b, &[dw], &ModelParams::preset(Regime::S)).unwrap();
        let m = b.mode(0);
        let d = g.d() as f64;
        for i in 1..=16 {
            for j in 1..=16 {
                let div = (m.u[[i, j]] - m.u[[i - 1, j]] + m.v[[i, j]] - m.v[[i, j - 1]]) * d;
                assert_abs_diff_eq!(t.eta[[i, j]], -hgt * div * dw, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn mass_is_conserved_with_noise() {
        let g = grid(16);
        let b = NoiseBasis::random(&g, 10, 2.0, 0.1, &mut stream(2, &[])).unwrap();
        let m = Model::new(g, ModelParams::preset(Regime::S), Some(b)).unwrap();
        let s0 = bumpy(&g);
        let s1 = m.propagate(&s0, 20, &mut stream(3, &[]), None).unwrap();
        assert_abs_diff_eq!(s1.mass(), s0.mass(), epsilon = 1e-13);
    }

    #[test]
    fn propagate_is_deterministic_and_replayable() {
        let g = grid(8);
        let b = NoiseBasis::random(&g, 4, 2.0, 0.1, &mut stream(2, &[])).unwrap();
        let m = Model::new(g, ModelParams::preset(Regime::S), Some(b)).unwrap();
        let s0 = bumpy(&g);
        let mut path = Vec::new();
        let a = m.propagate(&s0, 5, &mut stream(9, &[]), Some(&mut path)).unwrap();
        let b = m.propagate(&s0, 5, &mut stream(9, &[]), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.propagate_path(&s0, &path).unwrap(), a);
        assert_eq!(m.propagate(&s0, 0, &mut stream(9, &[]), None).unwrap(), s0);
    }

    #[test]
    fn blowup_reports_step() {
        let g = grid(8);
        let p = ModelParams { dt: 10.0, ..ModelParams::preset(Regime::S) };
        let m = Model::new(g, p, None).unwrap();
        let err = m.propagate(&bumpy(&g), 500, &mut stream(0, &[]), None).unwrap_err();
        assert!(matches!(err, Error::Blowup { step } if step > 0), "{err}");
    }

    #[test]
    fn rk4_scalar_is_fourth_order() {
        let lambda = -1.3;
        let err = |n: usize| {
            let h = 1.0 / n as f64;
            let mut y = 1.0;
            for _ in 0..n {
                y = rk4(&y, |x| Ok(lambda * h * x)).unwrap();
            }
            (y - lambda.exp()).abs()
        };
        let order = (err(10) / err(20)).log2();
        assert!((order - 4.0).abs() < 0.15, "order {order}");
    }
}
