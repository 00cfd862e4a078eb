//! Transport noise basis `xi_n` and the jitter basis `zeta_n` used for
//! roughening. Both are stored as full staggered arrays with boundary
//! conditions applied, so sampling is a weighted sum of precomputed modes.

use std::f64::consts::{FRAC_PI_2, PI};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::grid::{Component, FieldBlock, GridSpec, StaggeredState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl ModeCoefficients {
    fn sum_sq(&self) -> f64 {
        self.alpha * self.alpha + self.beta * self.beta + self.gamma * self.gamma + self.delta * self.delta
    }
}

/// Velocity of transport mode `n` (1-based) at `(x, y)`.
pub fn transport_mode(n: usize, c: &ModeCoefficients, sigma: f64, p: f64, x: f64, y: f64) -> (f64, f64) {
    let k = 2.0 * PI * n as f64;
    let amp = sigma / (n as f64).powf(p);
    let (sx, cx) = (k * x).sin_cos();
    let (sy, cy) = (k * y).sin_cos();
    (
        amp * cy * (c.alpha * sx + c.beta * cx),
        amp * sy * (c.gamma * sx + c.delta * cx),
    )
}

#[derive(Debug, Clone)]
pub struct NoiseBasis {
    sigma: f64,
    p: f64,
    coeffs: Vec<ModeCoefficients>,
    /// Mode velocity fields; `eta` is unused and zero.
    modes: Vec<StaggeredState>,
}

impl NoiseBasis {
    /// Draw coefficients Uniform(0, 1) and evaluate the modes on `grid`.
    pub fn random<R: Rng + ?Sized>(grid: &GridSpec, n_modes: usize, p: f64, sigma: f64, rng: &mut R) -> Result<Self> {
        let unit = Uniform::new(0.0, 1.0).expect("valid range");
        let coeffs = (0..n_modes)
            .map(|_| ModeCoefficients {
                alpha: unit.sample(rng),
                beta: unit.sample(rng),
                gamma: unit.sample(rng),
                delta: unit.sample(rng),
            })
            .collect();
        Self::from_coefficients(grid, sigma, p, coeffs)
    }

    pub fn from_coefficients(grid: &GridSpec, sigma: f64, p: f64, coeffs: Vec<ModeCoefficients>) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0 && p.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise amplitude {sigma} / decay {p}")));
        }
        let d = grid.d();
        let modes = coeffs
            .iter()
            .enumerate()
            .map(|(idx, c)| {
                let mut m = StaggeredState::zeros(grid);
                for i in 1..=d {
                    for j in 1..=d {
                        let (x, y) = grid.u_point(i, j);
                        m.u[[i, j]] = transport_mode(idx + 1, c, sigma, p, x, y).0;
                        let (x, y) = grid.v_point(i, j);
                        m.v[[i, j]] = transport_mode(idx + 1, c, sigma, p, x, y).1;
                    }
                }
                m.apply_boundary_conditions();
                m
            })
            .collect();
        Ok(Self { sigma, p, coeffs, modes })
    }

    pub fn n_modes(&self) -> usize {
        self.coeffs.len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn coefficients(&self) -> &[ModeCoefficients] {
        &self.coeffs
    }

    pub fn mode(&self, n: usize) -> &StaggeredState {
        &self.modes[n]
    }

    /// Expected `d<W, W>_t / dt` in L2: `(sigma^2 / 4) sum |c_n|^2 / n^{2p}`.
    pub fn quad_variation_rate(&self) -> f64 {
        let s: f64 = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| c.sum_sq() / ((i + 1) as f64).powf(2.0 * self.p))
            .sum();
        self.sigma * self.sigma / 4.0 * s
    }

    /// Brownian increments `dW_n ~ N(0, dt)`.
    pub fn sample_increments<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R) -> Vec<f64> {
        let s = dt.sqrt();
        (0..self.n_modes())
            .map(|_| s * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>()
    }

    /// `sum_n xi_n dW_n` as a pair of (u, v) arrays.
    pub fn combine(&self, dw: &[f64]) -> Result<(Array2<f64>, Array2<f64>)> {
        if dw.len() != self.n_modes() {
            return Err(Error::NoiseLength { expected: self.n_modes(), got: dw.len() });
        }
        let shape = self.modes.first().map(|m| m.u.dim()).unwrap_or((0, 0));
        let mut xu = Array2::zeros(shape);
        let mut xv = Array2::zeros(shape);
        for (m, &w) in self.modes.iter().zip(dw) {
            xu.scaled_add(w, &m.u);
            xv.scaled_add(w, &m.v);
        }
        Ok((xu, xv))
    }
}

/// Noise amplitude giving a mode-averaged spread of `target` times the mean
/// speed: `target * mean_speed * sqrt(3) / sqrt(sum n^{-2p})`.
pub fn calibrate_sigma_noise(mean_speed: f64, p: f64, n_modes: usize, target: f64) -> Result<f64> {
    if !(mean_speed.is_finite() && mean_speed > 0.0 && target >= 0.0 && p > 0.0) || n_modes == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot calibrate from mean speed {mean_speed} with {n_modes} modes"
        )));
    }
    let s: f64 = (1..=n_modes).map(|n| (n as f64).powf(-2.0 * p)).sum();
    Ok(target * mean_speed * 3f64.sqrt() / s.sqrt())
}

/// Smooth random perturbations `sigma_jit sum_n zeta_n Z_n / n^2`.
///
/// The u and eta modes use `cos(2 pi n y)` in y and the v modes `sin(2 pi n y)`,
/// so every mode satisfies the wall conditions; all are `sin + cos` in x.
#[derive(Debug, Clone)]
pub struct JitterBasis {
    sigma: f64,
    modes: Vec<StaggeredState>,
}

impl JitterBasis {
    pub fn new(grid: &GridSpec, n_modes: usize, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("jitter amplitude {sigma}")));
        }
        let d = grid.d();
        let even = |n: f64, x: f64, y: f64| {
            let k = 2.0 * PI * n;
            ((k * y).cos() + (k * y + FRAC_PI_2).sin()) * ((k * x).sin() + (k * x).cos())
        };
        let odd = |n: f64, x: f64, y: f64| {
            let k = 2.0 * PI * n;
            ((k * y).sin() - (k * y + FRAC_PI_2).cos()) * ((k * x).sin() + (k * x).cos())
        };
        let modes = (1..=n_modes)
            .map(|n| {
                let n = n as f64;
                let mut m = StaggeredState::zeros(grid);
                for i in 1..=d {
                    for j in 1..=d {
                        let (x, y) = grid.u_point(i, j);
                        m.u[[i, j]] = even(n, x, y);
                        let (x, y) = grid.v_point(i, j);
                        m.v[[i, j]] = odd(n, x, y);
                        let (x, y) = grid.center(i, j);
                        m.eta[[i, j]] = even(n, x, y);
                    }
                }
                m.apply_boundary_conditions();
                m
            })
            .collect();
        Ok(Self { sigma, modes })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn mode(&self, n: usize) -> &StaggeredState {
        &self.modes[n]
    }

    /// Mode weights `sigma Z_n / n^2`.
    pub fn sample_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (1..=self.n_modes())
            .map(|n| {
                let z: f64 = StandardNormal.sample(rng);
                self.sigma * z / (n * n) as f64
            })
            .collect()
    }

    /// A full jitter field with boundary conditions applied.
    pub fn sample_field<R: Rng + ?Sized>(&self, grid: &GridSpec, rng: &mut R) -> StaggeredState {
        let w = self.sample_weights(rng);
        let mut s = StaggeredState::zeros(grid);
        for (m, &c) in self.modes.iter().zip(&w) {
            s.axpy(c, m);
        }
        s.apply_boundary_conditions();
        s
    }

    /// Add one jitter sample, restricted to the block's box, to `block`.
    pub fn perturb_block<R: Rng + ?Sized>(&self, grid: &GridSpec, block: &mut FieldBlock, rng: &mut R) {
        let w = self.sample_weights(rng);
        let bbox = block.bbox;
        let cols: Vec<usize> = (0..bbox.width()).map(|a| grid.wrap_x(bbox.x0 + a as isize)).collect();
        for c in Component::ALL {
            let mut acc = Array2::<f64>::zeros((bbox.width(), bbox.height()));
            for (m, &coef) in self.modes.iter().zip(&w) {
                let src = m.component(c);
                for (a, &ix) in cols.iter().enumerate() {
                    for b in 0..bbox.height() {
                        acc[[a, b]] += coef * src[[ix, bbox.y0 + b]];
                    }
                }
            }
            *block.component_mut(c) += &acc;
        }
    }
}
