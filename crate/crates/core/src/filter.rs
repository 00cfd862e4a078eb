//! Global particle filter: log-domain weights, effective sample size,
//! stochastic universal resampling, adaptive tempering and jittering.
//!
//! Tempering operates on [`WorkingParticle`]s, i.e. field blocks over an index
//! box. The global filter uses a single box covering the interior, the
//! localized filter one box per region, so both share the same loop.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{restrict_field, write_block, FieldBlock, GridSpec, StaggeredState};
use crate::noise::JitterBasis;
use crate::observations::{global_log_likelihood, BlockView, ObservationBatch};
use crate::rng::{domain, stream};
use crate::swe::Model;

/// Exponentiate after subtracting the maximum, then normalise.
pub fn normalize_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    if log_w.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::NonFinite("log-weights"));
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights);
    }
    let mut w: Vec<f64> = log_w.iter().map(|&l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    Ok(w)
}

pub fn ess(w: &[f64]) -> f64 {
    1.0 / w.iter().map(|x| x * x).sum::<f64>()
}

/// `w^phi`, renormalised, from log-weights.
pub fn tempered_log(log_w: &[f64], phi: f64) -> Result<Vec<f64>> {
    if !(phi > 0.0 && phi <= 1.0) {
        return Err(Error::Temperature(phi));
    }
    let scaled: Vec<f64> = log_w.iter().map(|&l| phi * l).collect();
    normalize_weights(&scaled)
}

/// `w^phi`, renormalised, from normalised weights.
pub fn tempered_weights(w: &[f64], phi: f64) -> Result<Vec<f64>> {
    let logs: Vec<f64> = w.iter().map(|x| x.ln()).collect();
    tempered_log(&logs, phi)
}

/// Bisection for the temperature increment `delta` in `(0, remaining]` with
/// `ess(w^delta)` within `ess_tol` of `n_ess`; stops once the bracket is
/// narrower than `tol`. Never returns less than `min(tol, remaining)`.
pub fn find_temperature_log(log_w: &[f64], n_ess: f64, remaining: f64, tol: f64, ess_tol: f64) -> Result<f64> {
    if !(remaining > 0.0 && remaining <= 1.0) {
        return Err(Error::Temperature(remaining));
    }
    if ess(&tempered_log(log_w, remaining)?) >= n_ess {
        return Ok(remaining);
    }
    let floor = tol.min(remaining);
    let (mut lo, mut hi) = (0.0, remaining);
    loop {
        let mid = 0.5 * (lo + hi);
        let e = ess(&tempered_log(log_w, mid)?);
        if (e - n_ess).abs() <= ess_tol {
            return Ok(mid.max(floor));
        }
        if e < n_ess {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < tol {
            return Ok(lo.max(floor));
        }
    }
}

/// [`find_temperature_log`] on normalised weights.
pub fn find_temperature(w: &[f64], n_ess: f64, remaining: f64, tol: f64, ess_tol: f64) -> Result<f64> {
    let logs: Vec<f64> = w.iter().map(|x| x.ln()).collect();
    find_temperature_log(&logs, n_ess, remaining, tol, ess_tol)
}

/// Offspring counts from the comb `u0 + r / N`, `u0` in `[0, 1/N)`.
pub fn sus_counts(w: &[f64], u0: f64) -> Vec<usize> {
    let n = w.len();
    let mut counts = vec![0; n];
    let mut cum = 0.0;
    let mut r = 0;
    for (i, &wi) in w.iter().enumerate() {
        cum += wi;
        let upper = if i + 1 == n { f64::INFINITY } else { cum };
        while r < n && u0 + (r as f64) / (n as f64) < upper {
            counts[i] += 1;
            r += 1;
        }
    }
    counts
}

pub fn resample_sus<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> Vec<usize> {
    let u0 = rng.random::<f64>() / w.len() as f64;
    sus_counts(w, u0)
}

/// `(child, parent)` pairs: particles with no offspring are overwritten, in
/// index order, by the surplus copies of parents with count > 1.
pub fn assign_children(counts: &[usize]) -> Vec<(usize, usize)> {
    let mut free = counts.iter().enumerate().filter(|(_, &c)| c == 0).map(|(i, _)| i);
    counts
        .iter()
        .enumerate()
        .flat_map(|(p, &c)| std::iter::repeat_n(p, c.saturating_sub(1)))
        .map(|p| (free.next().expect("counts sum to N"), p))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JitterKind {
    None,
    Roughening,
    Mcmc { rho: f64, m_jit: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemperingConfig {
    /// Tempering starts when the ESS drops below this.
    pub n_ess: f64,
    /// When false an ESS collapse triggers a single resampling step.
    pub tempering: bool,
    pub bisection_tol: f64,
    pub ess_tol: f64,
    pub max_iters: usize,
    pub jitter: JitterKind,
}

impl TemperingConfig {
    pub fn for_ensemble(n: usize, jitter: JitterKind) -> Self {
        Self {
            n_ess: 0.8 * n as f64,
            tempering: true,
            bisection_tol: 1e-4,
            ess_tol: 0.01 * n as f64,
            max_iters: 200,
            jitter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n_ess >= 0.0
            && self.bisection_tol > 0.0
            && self.bisection_tol < 0.5
            && self.ess_tol >= 0.0
            && match self.jitter {
                JitterKind::Mcmc { rho, m_jit } => (0.0..=1.0).contains(&rho) && m_jit >= 1,
                _ => true,
            };
        if !ok {
            return Err(Error::InvalidArgument(format!("tempering config {self:?}")));
        }
        Ok(())
    }
}

/// State at the previous assimilation time and the increments that carried
/// it forward; needed by MCMC jittering.
#[derive(Debug, Clone)]
pub struct History {
    pub prev: Arc<StaggeredState>,
    pub path: Arc<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct WorkingParticle {
    pub block: FieldBlock,
    pub history: Option<History>,
    /// Ensemble member this particle descends from; children inherit it.
    pub origin: usize,
}

/// Everything the jitter step needs besides the particles.
pub struct Rejuvenator<'a> {
    pub grid: &'a GridSpec,
    pub jitter: &'a JitterBasis,
    pub model: Option<&'a Model>,
    pub kind: JitterKind,
}

/// Stream key of one assimilation in one region.
#[derive(Debug, Clone, Copy)]
pub struct StreamKey {
    pub seed: u64,
    pub k: usize,
    pub region: usize,
}

impl StreamKey {
    fn resample(&self, iter: usize) -> ChaCha8Rng {
        stream(self.seed, &[domain::RESAMPLE, self.k as u64, self.region as u64, iter as u64])
    }

    fn jitter(&self, iter: usize, child: usize) -> ChaCha8Rng {
        stream(
            self.seed,
            &[domain::JITTER, self.k as u64, self.region as u64, iter as u64, child as u64],
        )
    }
}

impl Rejuvenator<'_> {
    /// New child from `parent`; returns the particle and its rejection count.
    fn child<F>(&self, slot: usize, parent: &WorkingParticle, phi: f64, rng: &mut ChaCha8Rng, log_lik: &F) -> Result<(WorkingParticle, usize)>
    where
        F: Fn(usize, &WorkingParticle) -> f64,
    {
        match self.kind {
            JitterKind::None => Ok((parent.clone(), 0)),
            JitterKind::Roughening => {
                let mut c = parent.clone();
                self.jitter.perturb_block(self.grid, &mut c.block, rng);
                Ok((c, 0))
            }
            JitterKind::Mcmc { rho, m_jit } => {
                let model = self
                    .model
                    .ok_or_else(|| Error::InvalidArgument("MCMC jittering needs the model".into()))?;
                let hist = parent
                    .history
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("MCMC jittering needs noise paths".into()))?;
                let base = log_lik(slot, parent);
                let sd = model.params.dt.sqrt() * (1.0 - rho * rho).sqrt();
                for attempt in 0..m_jit {
                    let path: Vec<Vec<f64>> = hist
                        .path
                        .iter()
                        .map(|dw| {
                            dw.iter()
                                .map(|&w| {
                                    let z: f64 = StandardNormal.sample(rng);
                                    rho * w + sd * z
                                })
                                .collect()
                        })
                        .collect();
                    let state = model.propagate_path(&hist.prev, &path)?;
                    let cand = WorkingParticle {
                        block: restrict_field(&state, parent.block.bbox, self.grid)?,
                        history: Some(History { prev: Arc::clone(&hist.prev), path: Arc::new(path) }),
                        origin: parent.origin,
                    };
                    let u: f64 = rng.random();
                    if u.ln() <= phi * (log_lik(slot, &cand) - base) {
                        return Ok((cand, attempt));
                    }
                }
                Ok((parent.clone(), m_jit))
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemperReport {
    /// Tempering iterations before the final resample.
    pub iterations: usize,
    /// Mean over resampling rounds of the largest MCMC rejection count.
    pub mcmc_mean: f64,
}

fn resample_and_jitter<F>(
    particles: &mut [WorkingParticle],
    log_lik: &mut [f64],
    w: &[f64],
    phi: f64,
    rejuv: &Rejuvenator,
    key: StreamKey,
    iter: usize,
    f: &F,
) -> Result<usize>
where
    F: Fn(usize, &WorkingParticle) -> f64 + Sync,
{
    let counts = resample_sus(w, &mut key.resample(iter));
    let family = assign_children(&counts);
    let snapshot: &[WorkingParticle] = particles;
    let children: Vec<(usize, WorkingParticle, usize)> = family
        .par_iter()
        .map(|&(c, p)| {
            let (child, rejects) = rejuv.child(c, &snapshot[p], phi, &mut key.jitter(iter, c), f)?;
            Ok((c, child, rejects))
        })
        .collect::<Result<_>>()?;
    let mut worst = 0;
    for (c, child, rejects) in children {
        log_lik[c] = f(c, &child);
        particles[c] = child;
        worst = worst.max(rejects);
    }
    Ok(worst)
}

/// Adaptive tempering (remaining-temperature form) followed by the final
/// resample at whatever temperature is left. `prior_log_w` enters only until
/// the first resampling.
pub fn temper<F>(
    particles: &mut [WorkingParticle],
    prior_log_w: &[f64],
    log_lik: F,
    rejuv: &Rejuvenator,
    cfg: &TemperingConfig,
    key: StreamKey,
) -> Result<TemperReport>
where
    F: Fn(usize, &WorkingParticle) -> f64 + Sync,
{
    let mut ll: Vec<f64> = particles.par_iter().enumerate().map(|(i, p)| log_lik(i, p)).collect();
    let mut log_w: Vec<f64> = ll.iter().zip(prior_log_w).map(|(l, p)| l + p).collect();
    let mut remaining = 1.0;
    let mut iters = 0;
    let mut worst = Vec::new();

    if cfg.tempering {
        while ess(&tempered_log(&log_w, remaining)?) < cfg.n_ess {
            if iters >= cfg.max_iters {
                return Err(Error::TemperingStalled { iterations: iters, remaining });
            }
            let delta = find_temperature_log(&log_w, cfg.n_ess, remaining, cfg.bisection_tol, cfg.ess_tol)?;
            let w = tempered_log(&log_w, delta)?;
            let phi = 1.0 - remaining + delta;
            worst.push(resample_and_jitter(particles, &mut ll, &w, phi, rejuv, key, iters, &log_lik)?);
            log_w.clone_from(&ll);
            remaining -= delta;
            iters += 1;
            if remaining <= 1e-12 {
                break;
            }
        }
    }
    if remaining > 1e-12 {
        let w = tempered_log(&log_w, remaining)?;
        worst.push(resample_and_jitter(particles, &mut ll, &w, 1.0, rejuv, key, iters, &log_lik)?);
    }
    let mcmc_mean = if worst.is_empty() { 0.0 } else { worst.iter().sum::<usize>() as f64 / worst.len() as f64 };
    Ok(TemperReport { iterations: iters, mcmc_mean })
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub particles: Vec<StaggeredState>,
    pub weights: Vec<f64>,
    /// Per-particle history of the last forecast window (MCMC jittering).
    pub histories: Vec<Option<History>>,
}

impl Ensemble {
    pub fn new(particles: Vec<StaggeredState>) -> Self {
        let n = particles.len();
        Self { weights: vec![1.0 / n as f64; n], histories: vec![None; n], particles }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.ln()).collect()
    }

    /// `log w_{k-1} + log g_k`, normalised.
    pub fn updated_weights(&self, batch: &ObservationBatch) -> Result<Vec<f64>> {
        let lw: Vec<f64> = self
            .particles
            .par_iter()
            .zip(&self.weights)
            .map(|(p, w)| w.ln() + global_log_likelihood(p, batch))
            .collect();
        normalize_weights(&lw)
    }

    pub fn reset_weights(&mut self) {
        let n = self.len() as f64;
        self.weights.iter_mut().for_each(|w| *w = 1.0 / n);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssimilationReport {
    pub k: usize,
    pub ess_before: f64,
    pub tempering_steps: usize,
    pub mcmc_mean: f64,
    pub resampled: bool,
}

/// Reweight, and when the ESS falls below threshold, temper and jitter the
/// ensemble and reset the weights.
pub fn pf_assimilate(
    ens: &mut Ensemble,
    batch: &ObservationBatch,
    rejuv: &Rejuvenator,
    cfg: &TemperingConfig,
    seed: u64,
) -> Result<AssimilationReport> {
    let w = ens.updated_weights(batch)?;
    let ess_before = ess(&w);
    let mut report = AssimilationReport { k: batch.k, ess_before, tempering_steps: 0, mcmc_mean: 0.0, resampled: false };
    if ess_before >= cfg.n_ess {
        ens.weights = w;
        return Ok(report);
    }
    let grid = rejuv.grid;
    let bbox = grid.interior_box();
    let mut work: Vec<WorkingParticle> = ens
        .particles
        .iter()
        .zip(&ens.histories)
        .enumerate()
        .map(|(i, (p, h))| Ok(WorkingParticle { block: restrict_field(p, bbox, grid)?, history: h.clone(), origin: i }))
        .collect::<Result<_>>()?;
    let prior = ens.log_weights();
    let f = |_: usize, p: &WorkingParticle| global_log_likelihood(&BlockView { grid, block: &p.block }, batch);
    let t = temper(&mut work, &prior, f, rejuv, cfg, StreamKey { seed, k: batch.k, region: 0 })?;
    for ((state, hist), wp) in ens.particles.iter_mut().zip(ens.histories.iter_mut()).zip(work) {
        write_block(state, &wp.block, grid);
        state.apply_boundary_conditions();
        *hist = wp.history;
    }
    ens.reset_weights();
    report.tempering_steps = t.iterations;
    report.mcmc_mean = t.mcmc_mean;
    report.resampled = true;
    Ok(report)
}
