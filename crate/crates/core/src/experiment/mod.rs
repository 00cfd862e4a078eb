//! Twin experiments: initial conditions, signal generation, filtering runs
//! and their persisted records.

pub mod config;
pub mod snapshot;

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::filter::{pf_assimilate, Ensemble, History, JitterKind, Rejuvenator};
use crate::grid::{Component, GridSpec, StaggeredState};
use crate::localization::lpf_assimilate;
use crate::metrics::{emre, rb, write_metrics, MetricRecord};
use crate::noise::{JitterBasis, NoiseBasis};
use crate::observations::{synthesize, write_batch, ObservationBatch};
use crate::rng::{domain, stream};
use crate::swe::{Model, ModelParams};

pub use config::Config;

/// Closed-form initial height.
pub fn eta_bar(x: f64, y: f64) -> f64 {
    let xx = x * (1.0 - x);
    1.5 + 0.1 * (y - 0.5).atan() - 0.05 * (0.5 * y).atan()
        + 0.03 * (0.9 * xx).atan()
        + 0.2 * (2.0 * PI * x).sin()
        + 0.03 * (4.0 * PI * x).sin() * y.sin().powi(4)
        - 0.05 * (-0.5 * xx).exp()
        + 0.05 * (-0.5 * y).exp()
        + 0.1 * (2.0 * PI * y).sin() * (2.0 * PI * x).cos()
        + 0.3 * (6.0 * PI * x).cos().powi(2)
}

/// `eta_bar` at cell centres, boundary conditions applied.
pub fn initial_eta(grid: &GridSpec) -> Array2<f64> {
    let mut s = StaggeredState::zeros(grid);
    for i in 1..=grid.d() {
        for j in 1..=grid.d() {
            let (x, y) = grid.center(i, j);
            s.eta[[i, j]] = eta_bar(x, y);
        }
    }
    s.apply_boundary_conditions();
    s.eta
}

/// Geostrophically balanced velocity from `eta` (ghosts filled):
/// `u = -c d_y eta`, `v = c d_x eta` with `c = Ro / (f Fr^2)`, centred
/// differences averaged onto the staggered points. Unscaled.
pub fn balanced_velocity(grid: &GridSpec, eta: &Array2<f64>, params: &ModelParams) -> Result<(Array2<f64>, Array2<f64>)> {
    let d = grid.d();
    if eta.dim() != (d + 2, d + 2) {
        return Err(Error::InvalidArgument(format!("eta has shape {:?}", eta.dim())));
    }
    let c = params.rossby / (params.coriolis * params.froude * params.froude);
    let k = 0.25 * d as f64;
    let mut s = StaggeredState::zeros(grid);
    for i in 1..=d {
        for j in 1..=d {
            let dy = (eta[[i, j + 1]] - eta[[i, j - 1]] + eta[[i + 1, j + 1]] - eta[[i + 1, j - 1]]) * k;
            s.u[[i, j]] = -c * dy;
        }
        for j in 1..d {
            let dx = (eta[[i + 1, j]] - eta[[i - 1, j]] + eta[[i + 1, j + 1]] - eta[[i - 1, j + 1]]) * k;
            s.v[[i, j]] = c * dx;
        }
    }
    s.apply_boundary_conditions();
    Ok((s.u, s.v))
}

/// `balanced_velocity` with each component divided by its largest magnitude.
pub fn geostrophic_velocity(grid: &GridSpec, eta: &Array2<f64>, params: &ModelParams) -> Result<(Array2<f64>, Array2<f64>)> {
    let (mut u, mut v) = balanced_velocity(grid, eta, params)?;
    for (name, a) in [("u", &mut u), ("v", &mut v)] {
        let m = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::InvalidArgument(format!("geostrophic {name} is identically zero")));
        }
        a.mapv_inplace(|x| x / m);
    }
    Ok((u, v))
}

/// Balanced analytic state that starts the deterministic spin-up.
pub fn initial_state(grid: &GridSpec, params: &ModelParams) -> Result<StaggeredState> {
    let eta = initial_eta(grid);
    let (u, v) = geostrophic_velocity(grid, &eta, params)?;
    Ok(StaggeredState { u, v, eta })
}

/// Transport noise of the signal and particles, drawn from the signal seed.
pub fn noise_basis(cfg: &Config) -> Result<NoiseBasis> {
    let m = &cfg.model;
    NoiseBasis::random(&cfg.grid()?, m.noise_modes, m.noise_p, m.sigma_noise, &mut stream(cfg.seeds.signal, &[domain::MODEL]))
}

pub fn stochastic_model(cfg: &Config) -> Result<Model> {
    Model::new(cfg.grid()?, cfg.params(), Some(noise_basis(cfg)?))
}

/// Noise-free run from the analytic state.
pub fn deterministic_spinup(cfg: &Config) -> Result<StaggeredState> {
    let model = Model::new(cfg.grid()?, cfg.params(), None)?;
    let s0 = initial_state(&model.grid, &model.params)?;
    model.propagate(&s0, cfg.run.burn_in_deterministic, &mut stream(0, &[]), None)
}

#[derive(Debug, Clone)]
pub struct InitialConditions {
    pub signal: StaggeredState,
    pub ensemble: Vec<StaggeredState>,
    /// Which of the `N + 1` stochastic runs became the signal.
    pub signal_index: usize,
}

/// Stochastic burn-in run `m` of `0..=N` from the spun-up state.
pub fn burn_in_member(cfg: &Config, model: &Model, spun_up: &StaggeredState, m: usize) -> Result<StaggeredState> {
    let mut rng = stream(cfg.seeds.ensemble, &[domain::BURN_IN, m as u64]);
    model.propagate(spun_up, cfg.run.burn_in_stochastic, &mut rng, None)
}

/// Which of the `N + 1` burn-in runs becomes the signal.
pub fn signal_index(cfg: &Config) -> usize {
    stream(cfg.seeds.signal, &[domain::SELECT]).random_range(0..=cfg.filter.particles)
}

/// `N + 1` independent stochastic runs from the spun-up state; one chosen
/// at random is the signal, the rest the ensemble.
pub fn stochastic_burn_in(cfg: &Config, model: &Model, spun_up: &StaggeredState) -> Result<InitialConditions> {
    let mut runs: Vec<StaggeredState> = (0..=cfg.filter.particles)
        .into_par_iter()
        .map(|m| burn_in_member(cfg, model, spun_up, m))
        .collect::<Result<_>>()?;
    let signal_index = signal_index(cfg);
    let signal = runs.remove(signal_index);
    Ok(InitialConditions { signal, ensemble: runs, signal_index })
}

pub fn burn_in_pipeline(cfg: &Config, model: &Model) -> Result<InitialConditions> {
    let spun = deterministic_spinup(cfg)?;
    stochastic_burn_in(cfg, model, &spun)
}

/// Free-running signal trajectory, sampled every `r` steps.
pub fn simulate_signal(cfg: &Config, model: &Model, start: &StaggeredState, windows: usize) -> Result<Vec<StaggeredState>> {
    let r = cfg.observations.r;
    let mut out = Vec::with_capacity(windows);
    let mut s = start.clone();
    for k in 1..=windows {
        let mut rng = stream(cfg.seeds.signal, &[domain::SIGNAL, k as u64]);
        s = model.propagate(&s, r, &mut rng, None).map_err(|e| e.at_step(k))?;
        out.push(s.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticRecord {
    pub k: usize,
    pub ess_before: f64,
    pub resampled: bool,
    /// Mean over regions for the localised filter.
    pub tempering_steps: f64,
    pub mcmc_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionRecord {
    pub k: usize,
    pub region: usize,
    pub ess: f64,
    pub tempering_steps: usize,
    pub mcmc_mean: f64,
}

/// Between-assimilation errors at model step `step`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRecord {
    pub step: usize,
    pub rb_eta: f64,
    pub emre_eta: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunRecord {
    pub metrics: Vec<MetricRecord>,
    pub diagnostics: Vec<DiagnosticRecord>,
    pub regions: Vec<RegionRecord>,
    pub samples: Vec<SampleRecord>,
    pub observations: Vec<ObservationBatch>,
    /// `(k, signal, members)` at the snapshot cadence.
    pub snapshots: Vec<(usize, StaggeredState, Vec<StaggeredState>)>,
    pub seconds: f64,
}

fn sample(step: usize, signal: &StaggeredState, ens: &[StaggeredState]) -> Result<SampleRecord> {
    Ok(SampleRecord { step, rb_eta: rb(signal, ens, Component::Eta)?, emre_eta: emre(signal, ens, Component::Eta)? })
}

/// Burn in, then filter for `run.assimilations` windows.
pub fn run_twin_experiment(cfg: &Config) -> Result<RunRecord> {
    let model = stochastic_model(cfg)?;
    let ic = burn_in_pipeline(cfg, &model)?;
    run_from(cfg, &model, ic)
}

/// Filter from given initial conditions. The signal, observations and
/// particle noise use their own seeded streams, so filter randomness never
/// reaches the signal.
pub fn run_from(cfg: &Config, model: &Model, ic: InitialConditions) -> Result<RunRecord> {
    let t0 = Instant::now();
    let grid = model.grid;
    let schedule = cfg.schedule();
    let tcfg = cfg.tempering();
    let loc = cfg.localization()?;
    let jitter = JitterBasis::new(&grid, cfg.filter.jitter_modes, cfg.filter.sigma_jit)?;
    let needs_paths = matches!(tcfg.jitter, JitterKind::Mcmc { .. });
    let rejuv = Rejuvenator { grid: &grid, jitter: &jitter, model: Some(model), kind: tcfg.jitter };
    let (r, every) = (schedule.r, cfg.run.sample_every);

    let mut signal = ic.signal;
    let mut ens = Ensemble::new(ic.ensemble);
    let mut rec = RunRecord::default();

    for k in 1..=cfg.run.assimilations {
        let step = |e: Error| e.at_step(k);
        let prev: Vec<Arc<StaggeredState>> = if needs_paths {
            ens.particles.iter().map(|p| Arc::new(p.clone())).collect()
        } else {
            Vec::new()
        };
        let mut sig_rng = stream(cfg.seeds.signal, &[domain::SIGNAL, k as u64]);
        let mut rngs: Vec<_> = (0..ens.len())
            .map(|i| stream(cfg.seeds.ensemble, &[domain::PROPAGATE, k as u64, i as u64]))
            .collect();
        let mut paths: Vec<Vec<Vec<f64>>> = vec![Vec::new(); ens.len()];

        // Advance in chunks so errors can be sampled between assimilations.
        let mut done = 0;
        while done < r {
            let t = (k - 1) * r + done;
            let chunk = if every > 0 { (every - t % every).min(r - done) } else { r - done };
            signal = model.propagate(&signal, chunk, &mut sig_rng, None).map_err(step)?;
            ens.particles
                .par_iter_mut()
                .zip(rngs.par_iter_mut())
                .zip(paths.par_iter_mut())
                .try_for_each(|((p, rng), path)| -> Result<()> {
                    *p = model.propagate(p, chunk, rng, needs_paths.then_some(path))?;
                    Ok(())
                })
                .map_err(step)?;
            done += chunk;
            if every > 0 && (t + chunk) % every == 0 {
                rec.samples.push(sample(t + chunk, &signal, &ens.particles).map_err(step)?);
            }
        }
        if needs_paths {
            ens.histories = prev
                .into_iter()
                .zip(paths)
                .map(|(prev, path)| Some(History { prev, path: Arc::new(path) }))
                .collect();
        }

        let locations = schedule.locations_at(&grid, k)?;
        let mut obs_rng = stream(cfg.seeds.observation, &[domain::OBSERVE, k as u64]);
        let batch = synthesize(&signal, k, locations, schedule.sigma_obs, &mut obs_rng).map_err(step)?;

        match &loc {
            None => {
                let rep = pf_assimilate(&mut ens, &batch, &rejuv, &tcfg, cfg.seeds.filter).map_err(step)?;
                rec.diagnostics.push(DiagnosticRecord {
                    k,
                    ess_before: rep.ess_before,
                    resampled: rep.resampled,
                    tempering_steps: rep.tempering_steps as f64,
                    mcmc_mean: rep.mcmc_mean,
                });
            }
            Some(l) => {
                let rep = lpf_assimilate(&mut ens, &batch, l, &rejuv, &tcfg, cfg.seeds.filter).map_err(step)?;
                rec.diagnostics.push(DiagnosticRecord {
                    k,
                    ess_before: rep.ess_before,
                    resampled: rep.resampled,
                    tempering_steps: rep.mean_tempering_steps(),
                    mcmc_mean: rep.mean_mcmc(),
                });
                rec.regions.extend(rep.regions.iter().map(|g| RegionRecord {
                    k,
                    region: g.region,
                    ess: g.ess,
                    tempering_steps: g.tempering_steps,
                    mcmc_mean: g.mcmc_mean,
                }));
            }
        }
        rec.metrics.push(MetricRecord::compute(k, &signal, &ens.particles, &batch.locations).map_err(step)?);
        let snap = cfg.run.snapshot_every;
        if snap > 0 && k % snap == 0 {
            rec.snapshots.push((k, signal.clone(), ens.particles.clone()));
        }
        rec.observations.push(batch);
    }
    rec.seconds = t0.elapsed().as_secs_f64();
    Ok(rec)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn snapshot_name(k: usize, member: Option<usize>) -> String {
    match member {
        None => format!("signal_k{k:04}.bin"),
        Some(i) => format!("member_k{k:04}_{i:03}.bin"),
    }
}

impl RunRecord {
    /// Write every CSV, the snapshots and a manifest into `dir`.
    pub fn write(&self, dir: &Path, cfg: &Config) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_metrics(fs::File::create(dir.join("metrics.csv"))?, &self.metrics)?;
        write_csv(&dir.join("diagnostics.csv"), &self.diagnostics)?;
        write_csv(&dir.join("samples.csv"), &self.samples)?;
        if !self.regions.is_empty() {
            write_csv(&dir.join("regions.csv"), &self.regions)?;
        }
        let mut w = csv::Writer::from_path(dir.join("observations.csv"))?;
        for b in &self.observations {
            write_batch(&mut w, b)?;
        }
        w.flush()?;
        if !self.snapshots.is_empty() {
            let sd = dir.join("snapshots");
            fs::create_dir_all(&sd)?;
            for (k, signal, members) in &self.snapshots {
                snapshot::save(&sd.join(snapshot_name(*k, None)), signal)?;
                for (i, m) in members.iter().enumerate() {
                    snapshot::save(&sd.join(snapshot_name(*k, Some(i))), m)?;
                }
            }
        }
        write_manifest(dir, cfg, "run", self.seconds)
    }
}

/// Summary of one signal state, as written by `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignalRecord {
    pub k: usize,
    pub mass: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    /// Interior mean of |u| with both components averaged to cell centres.
    pub mean_speed: f64,
}

impl SignalRecord {
    pub fn of(k: usize, s: &StaggeredState) -> Self {
        let d = s.d();
        let (mut lo, mut hi, mut speed) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for i in 1..=d {
            for j in 1..=d {
                let e = s.eta[[i, j]];
                lo = lo.min(e);
                hi = hi.max(e);
                let u = 0.5 * (s.u[[i, j]] + s.u[[i - 1, j]]);
                let v = 0.5 * (s.v[[i, j]] + s.v[[i, j - 1]]);
                speed += u.hypot(v);
            }
        }
        Self { k, mass: s.mass(), eta_min: lo, eta_max: hi, mean_speed: speed / (d * d) as f64 }
    }
}

/// Recompute metrics from a run directory's snapshots and observation log.
pub fn recompute_metrics(dir: &Path) -> Result<Vec<MetricRecord>> {
    let batches = crate::observations::read_batches(fs::File::open(dir.join("observations.csv"))?, 1.0)?;
    let sd = dir.join("snapshots");
    let mut out = Vec::new();
    for b in &batches {
        let sig = sd.join(snapshot_name(b.k, None));
        if !sig.exists() {
            continue;
        }
        let signal = snapshot::load(&sig)?;
        let members: Vec<StaggeredState> = (0..)
            .map(|i| sd.join(snapshot_name(b.k, Some(i))))
            .take_while(|p| p.exists())
            .map(|p| snapshot::load(&p))
            .collect::<Result<_>>()?;
        out.push(MetricRecord::compute(b.k, &signal, &members, &b.locations)?);
    }
    if out.is_empty() {
        return Err(Error::Snapshot(format!("no snapshots under {}", sd.display())));
    }
    Ok(out)
}

/// Config echo, seeds, version and wall-clock time.
pub fn write_manifest(dir: &Path, cfg: &Config, command: &str, seconds: f64) -> Result<()> {
    let mut f = fs::File::create(dir.join("manifest.txt"))?;
    writeln!(f, "command = {command}")?;
    writeln!(f, "version = {} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))?;
    let s = cfg.seeds;
    writeln!(f, "seeds = signal:{} ensemble:{} observation:{} filter:{}", s.signal, s.ensemble, s.observation, s.filter)?;
    writeln!(f, "workers = {}", rayon::current_num_threads())?;
    writeln!(f, "wall_clock_seconds = {seconds:.3}")?;
    writeln!(f, "\n# config")?;
    f.write_all(cfg.to_toml_string().as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small(d: usize) -> Config {
        let o = [
            format!("model.d={d}"),
            "filter.particles=4".into(),
            "observations.d_obs=4".into(),
            "run.assimilations=2".into(),
            "run.burn_in_deterministic=5".into(),
            "run.burn_in_stochastic=5".into(),
            "run.sample_every=5".into(),
        ];
        Config::with_overrides("", &o).unwrap()
    }

    #[test]
    fn eta_bar_is_periodic_and_positive() {
        for j in 0..=20 {
            let y = j as f64 / 20.0;
            assert_abs_diff_eq!(eta_bar(0.0, y), eta_bar(1.0, y), epsilon = 1e-12);
        }
        let g = GridSpec::new(64).unwrap();
        let e = initial_eta(&g);
        assert!(e.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn eta_bar_probe() {
        // Hand expansion at (0.25, 0.5): sin(2 pi x) = 1, cos(2 pi x) = 0,
        // sin(4 pi x) = 0, cos(6 pi x) = 0.
        let xx: f64 = 0.1875;
        let want = 1.5 - 0.05 * 0.25f64.atan() + 0.03 * (0.9 * xx).atan() + 0.2 - 0.05 * (-0.5 * xx).exp()
            + 0.05 * (-0.25f64).exp();
        assert_abs_diff_eq!(eta_bar(0.25, 0.5), want, epsilon = 1e-12);
    }

    #[test]
    fn geostrophic_of_constant_is_an_error() {
        let g = GridSpec::new(8).unwrap();
        let eta = Array2::from_elem((10, 10), 1.0);
        assert!(geostrophic_velocity(&g, &eta, &ModelParams::preset(crate::swe::Regime::S)).is_err());
    }

    #[test]
    fn sloped_eta_gives_uniform_zonal_flow() {
        let g = GridSpec::new(8).unwrap();
        let p = ModelParams::preset(crate::swe::Regime::S);
        // eta = y on the index grid: d_y eta = d, d_x eta = 0.
        let eta = Array2::from_shape_fn((10, 10), |(_, j)| j as f64 / 8.0);
        let (u, v) = balanced_velocity(&g, &eta, &p).unwrap();
        let c = p.rossby / (p.coriolis * p.froude * p.froude);
        for i in 1..=8 {
            for j in 1..=8 {
                assert_abs_diff_eq!(u[[i, j]], -c, epsilon = 1e-12);
            }
        }
        assert!(v.iter().all(|&x| x == 0.0));
        assert!(geostrophic_velocity(&g, &eta, &p).is_err());
    }

    #[test]
    fn balanced_state_scales_to_unit_max() {
        let g = GridSpec::new(32).unwrap();
        let s = initial_state(&g, &ModelParams::preset(crate::swe::Regime::S)).unwrap();
        let max = |a: &Array2<f64>| a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert_abs_diff_eq!(max(&s.u), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(max(&s.v), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn burn_in_runs_are_distinct_and_signal_is_not_a_member() {
        let cfg = small(16);
        let model = stochastic_model(&cfg).unwrap();
        let ic = burn_in_pipeline(&cfg, &model).unwrap();
        assert_eq!(ic.ensemble.len(), 4);
        assert!(ic.ensemble.iter().all(|m| *m != ic.signal));
        assert_ne!(ic.ensemble[0], ic.ensemble[1]);
    }

    #[test]
    fn zero_stochastic_burn_in_gives_identical_members() {
        let mut cfg = small(16);
        cfg.run.burn_in_stochastic = 0;
        let model = stochastic_model(&cfg).unwrap();
        let ic = burn_in_pipeline(&cfg, &model).unwrap();
        assert!(ic.ensemble.iter().all(|m| *m == ic.signal));
    }

    #[test]
    fn twin_run_records_every_step_and_is_deterministic() {
        let cfg = small(16);
        let a = run_twin_experiment(&cfg).unwrap();
        assert_eq!(a.metrics.len(), 2);
        assert_eq!(a.diagnostics.len(), 2);
        assert_eq!(a.samples.iter().map(|s| s.step).collect::<Vec<_>>(), vec![5, 10, 15, 20]);
        let b = run_twin_experiment(&cfg).unwrap();
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn snapshots_reproduce_metrics() {
        let mut cfg = small(16);
        cfg.run.snapshot_every = 1;
        let rec = run_twin_experiment(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        rec.write(dir.path(), &cfg).unwrap();
        assert_eq!(recompute_metrics(dir.path()).unwrap(), rec.metrics);
        let header = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(header.starts_with(crate::metrics::METRICS_HEADER));
    }

    #[test]
    fn signal_record_of_rest_state() {
        let g = GridSpec::new(4).unwrap();
        let r = SignalRecord::of(3, &StaggeredState::rest(&g, 2.0));
        assert_eq!((r.eta_min, r.eta_max, r.mean_speed), (2.0, 2.0, 0.0));
    }

    #[test]
    fn signal_does_not_depend_on_filter_seed() {
        let mut cfg = small(16);
        let a = run_twin_experiment(&cfg).unwrap();
        cfg.seeds.filter = 99;
        cfg.filter.sigma_jit = 0.2;
        let b = run_twin_experiment(&cfg).unwrap();
        assert_eq!(a.observations, b.observations);
    }
}
