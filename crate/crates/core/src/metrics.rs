//! Ensemble error metrics against the signal.
//!
//! Norms are discrete L2 over interior points weighted by `dx^2`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Component, StaggeredState};
use crate::observations::GridPoint;

fn interior(s: &StaggeredState, c: Component) -> Vec<f64> {
    let d = s.d();
    let a = s.component(c);
    (1..=d).flat_map(|i| (1..=d).map(move |j| a[[i, j]])).collect()
}

fn l2(v: impl Iterator<Item = f64>, dx: f64) -> f64 {
    (v.map(|x| x * x).sum::<f64>() * dx * dx).sqrt()
}

/// Signal, members and member mean of one component on the interior.
struct Fields {
    signal: Vec<f64>,
    members: Vec<Vec<f64>>,
    mean: Vec<f64>,
    dx: f64,
    norm: f64,
}

impl Fields {
    fn new(signal: &StaggeredState, ensemble: &[StaggeredState], c: Component) -> Result<Self> {
        if ensemble.is_empty() {
            return Err(Error::InvalidArgument("empty ensemble".into()));
        }
        let dx = 1.0 / signal.d() as f64;
        let sig = interior(signal, c);
        let norm = l2(sig.iter().copied(), dx);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidArgument(format!("signal {} has norm {norm}", c.name())));
        }
        let members: Vec<Vec<f64>> = ensemble.iter().map(|e| interior(e, c)).collect();
        let n = members.len() as f64;
        let mut mean = vec![0.0; sig.len()];
        for m in &members {
            mean.iter_mut().zip(m).for_each(|(a, x)| *a += x);
        }
        mean.iter_mut().for_each(|a| *a /= n);
        Ok(Self { signal: sig, members, mean, dx, norm })
    }

    fn dist(&self, a: &[f64], b: &[f64]) -> f64 {
        l2(a.iter().zip(b).map(|(x, y)| x - y), self.dx)
    }

    fn emre(&self) -> f64 {
        let s: f64 = self.members.iter().map(|m| self.dist(&self.signal, m)).sum();
        s / self.members.len() as f64 / self.norm
    }

    fn rb(&self) -> f64 {
        self.dist(&self.signal, &self.mean) / self.norm
    }

    fn res(&self) -> f64 {
        let n = self.members.len();
        if n < 2 {
            return 0.0;
        }
        let s: f64 = self.members.iter().map(|m| self.dist(m, &self.mean)).sum();
        s / (n - 1) as f64 / self.norm
    }
}

/// Mean relative L2 error of the members.
pub fn emre(signal: &StaggeredState, ensemble: &[StaggeredState], c: Component) -> Result<f64> {
    Ok(Fields::new(signal, ensemble, c)?.emre())
}

/// Relative L2 error of the ensemble mean.
pub fn rb(signal: &StaggeredState, ensemble: &[StaggeredState], c: Component) -> Result<f64> {
    Ok(Fields::new(signal, ensemble, c)?.rb())
}

/// Relative spread about the mean, with `1 / (N - 1)`.
pub fn res(signal: &StaggeredState, ensemble: &[StaggeredState], c: Component) -> Result<f64> {
    if ensemble.len() < 2 {
        return Err(Error::InvalidArgument("spread needs at least two members".into()));
    }
    Ok(Fields::new(signal, ensemble, c)?.res())
}

/// CRPS of an ensemble against a scalar truth: the integral of the squared
/// difference between the empirical and the step CDF.
pub fn crps(members: &[f64], truth: f64) -> f64 {
    let n = members.len() as f64;
    let a: f64 = members.iter().map(|x| (x - truth).abs()).sum::<f64>() / n;
    let b: f64 = members
        .iter()
        .map(|x| members.iter().map(|y| (x - y).abs()).sum::<f64>())
        .sum::<f64>();
    a - b / (2.0 * n * n)
}

/// Location-averaged RMSE of eta at observation points.
pub fn rmse_obs(signal: &StaggeredState, ensemble: &[StaggeredState], locations: &[GridPoint]) -> Result<f64> {
    if locations.is_empty() || ensemble.is_empty() {
        return Err(Error::InvalidArgument("rmse needs locations and members".into()));
    }
    let n = ensemble.len() as f64;
    let s: f64 = locations
        .iter()
        .map(|p| {
            let t = signal.eta[[p.x, p.y]];
            (ensemble.iter().map(|e| (t - e.eta[[p.x, p.y]]).powi(2)).sum::<f64>() / n).sqrt()
        })
        .sum();
    Ok(s / locations.len() as f64)
}

/// Location-averaged CRPS of eta at observation points.
pub fn crps_obs(signal: &StaggeredState, ensemble: &[StaggeredState], locations: &[GridPoint]) -> Result<f64> {
    if locations.is_empty() || ensemble.is_empty() {
        return Err(Error::InvalidArgument("crps needs locations and members".into()));
    }
    let mut xs = vec![0.0; ensemble.len()];
    let s: f64 = locations
        .iter()
        .map(|p| {
            xs.iter_mut().zip(ensemble).for_each(|(x, e)| *x = e.eta[[p.x, p.y]]);
            crps(&xs, signal.eta[[p.x, p.y]])
        })
        .sum();
    Ok(s / locations.len() as f64)
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub k: usize,
    pub emre_u: f64,
    pub rb_u: f64,
    pub res_u: f64,
    pub emre_v: f64,
    pub rb_v: f64,
    pub res_v: f64,
    pub emre_eta: f64,
    pub rb_eta: f64,
    pub res_eta: f64,
    pub rmse_eta: f64,
    pub crps_eta: f64,
}

/// Header of the metrics CSV, in column order.
pub const METRICS_HEADER: &str =
    "k,emre_u,rb_u,res_u,emre_v,rb_v,res_v,emre_eta,rb_eta,res_eta,rmse_eta,crps_eta";

impl MetricRecord {
    pub fn compute(k: usize, signal: &StaggeredState, ensemble: &[StaggeredState], locations: &[GridPoint]) -> Result<Self> {
        let triple = |c| -> Result<(f64, f64, f64)> {
            let f = Fields::new(signal, ensemble, c)?;
            Ok((f.emre(), f.rb(), f.res()))
        };
        let (emre_u, rb_u, res_u) = triple(Component::U)?;
        let (emre_v, rb_v, res_v) = triple(Component::V)?;
        let (emre_eta, rb_eta, res_eta) = triple(Component::Eta)?;
        Ok(Self {
            k,
            emre_u,
            rb_u,
            res_u,
            emre_v,
            rb_v,
            res_v,
            emre_eta,
            rb_eta,
            res_eta,
            rmse_eta: rmse_obs(signal, ensemble, locations)?,
            crps_eta: crps_obs(signal, ensemble, locations)?,
        })
    }
}

pub fn write_metrics<W: Write>(w: W, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
