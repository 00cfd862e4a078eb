//! Observation schedules, synthetic data from the signal, and the Gaussian
//! log-likelihood (additive constant dropped).

use std::io::{Read, Write};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Component, FieldBlock, GridSpec, StaggeredState};

/// Strip x-positions on a 128-point grid, visited cyclically.
pub const DEFAULT_STRIP_CYCLE: [usize; 8] = [10, 90, 40, 120, 70, 20, 100, 50];

/// Interior grid point (both indices in `1..=d`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    FixedGrid { d_obs: usize },
    MovingStrip { width: usize, x_positions: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSchedule {
    pub kind: ScheduleKind,
    /// Model steps between assimilations.
    pub r: usize,
    pub sigma_obs: f64,
}

/// The default strip cycle rescaled to a `d`-point grid.
pub fn scaled_strip_cycle(d: usize) -> Vec<usize> {
    DEFAULT_STRIP_CYCLE
        .iter()
        .map(|&x| ((x * d) as f64 / 128.0).round().max(1.0) as usize)
        .collect()
}

impl ObservationSchedule {
    pub fn locations_at(&self, grid: &GridSpec, k: usize) -> Result<Vec<GridPoint>> {
        if k == 0 {
            return Err(Error::InvalidArgument("assimilation index starts at 1".into()));
        }
        let d = grid.d();
        match &self.kind {
            ScheduleKind::FixedGrid { d_obs } => {
                let d_obs = *d_obs;
                if d_obs == 0 || d_obs > d {
                    return Err(Error::InvalidArgument(format!("{d_obs}x{d_obs} observation grid on d = {d}")));
                }
                let s = d as f64 / d_obs as f64;
                let at = |m: usize| 1 + ((m as f64 + 0.5) * s - 0.5).floor() as usize;
                Ok((0..d_obs)
                    .flat_map(|a| (0..d_obs).map(move |b| GridPoint { x: at(a), y: at(b) }))
                    .collect())
            }
            ScheduleKind::MovingStrip { width, x_positions } => {
                if x_positions.is_empty() || *width == 0 || *width > d {
                    return Err(Error::InvalidArgument("empty strip schedule".into()));
                }
                let x0 = x_positions[(k - 1) % x_positions.len()] as isize;
                Ok((0..*width as isize)
                    .flat_map(|c| (1..=d).map(move |y| (c, y)))
                    .map(|(c, y)| GridPoint { x: grid.wrap_x(x0 + c), y })
                    .collect())
            }
        }
    }
}

/// Anything holding eta at interior grid points.
pub trait EtaField {
    fn eta_at(&self, p: GridPoint) -> f64;
}

impl EtaField for Array2<f64> {
    fn eta_at(&self, p: GridPoint) -> f64 {
        self[[p.x, p.y]]
    }
}

impl EtaField for StaggeredState {
    fn eta_at(&self, p: GridPoint) -> f64 {
        self.eta[[p.x, p.y]]
    }
}

/// A block paired with its grid; panics if the point is outside the box.
pub struct BlockView<'a> {
    pub grid: &'a GridSpec,
    pub block: &'a FieldBlock,
}

impl EtaField for BlockView<'_> {
    fn eta_at(&self, p: GridPoint) -> f64 {
        self.block
            .get(self.grid, Component::Eta, p.x, p.y)
            .expect("observation inside block")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    pub k: usize,
    pub locations: Vec<GridPoint>,
    pub values: Vec<f64>,
    pub sigma: f64,
}

impl ObservationBatch {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Squared residual of observation `s` against `f`.
    #[inline]
    pub fn residual_sq(&self, s: usize, f: &impl EtaField) -> f64 {
        let r = self.values[s] - f.eta_at(self.locations[s]);
        r * r
    }
}

/// `Y = eta(z) + sigma xi` at each location.
pub fn synthesize<R: Rng + ?Sized>(
    signal: &impl EtaField,
    k: usize,
    locations: Vec<GridPoint>,
    sigma: f64,
    rng: &mut R,
) -> Result<ObservationBatch> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("observation noise {sigma}")));
    }
    let values: Vec<f64> = locations
        .iter()
        .map(|&p| {
            let z: f64 = StandardNormal.sample(rng);
            signal.eta_at(p) + sigma * z
        })
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observations"));
    }
    Ok(ObservationBatch { k, locations, values, sigma })
}

/// `-(1 / 2 sigma^2) sum_s (Y_s - eta(z_s))^2`.
pub fn global_log_likelihood(f: &impl EtaField, batch: &ObservationBatch) -> f64 {
    let acc: f64 = (0..batch.len()).map(|s| batch.residual_sq(s, f)).sum();
    -0.5 * acc / (batch.sigma * batch.sigma)
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    k: usize,
    x_index: usize,
    y_index: usize,
    value: f64,
}

/// Append a batch as `k,x_index,y_index,value` rows.
pub fn write_batch<W: Write>(w: &mut csv::Writer<W>, batch: &ObservationBatch) -> Result<()> {
    for (p, &value) in batch.locations.iter().zip(&batch.values) {
        w.serialize(Row { k: batch.k, x_index: p.x, y_index: p.y, value })?;
    }
    Ok(())
}

/// Read batches back, grouped by `k` in file order.
pub fn read_batches<R: Read>(r: R, sigma: f64) -> Result<Vec<ObservationBatch>> {
    let mut out: Vec<ObservationBatch> = Vec::new();
    for row in csv::Reader::from_reader(r).deserialize() {
        let row: Row = row?;
        if out.last().map_or(true, |b| b.k != row.k) {
            out.push(ObservationBatch { k: row.k, locations: Vec::new(), values: Vec::new(), sigma });
        }
        let b = out.last_mut().expect("pushed above");
        b.locations.push(GridPoint { x: row.x_index, y: row.y_index });
        b.values.push(row.value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;

    fn grid_schedule(d_obs: usize) -> ObservationSchedule {
        ObservationSchedule { kind: ScheduleKind::FixedGrid { d_obs }, r: 10, sigma_obs: 0.05 }
    }

    #[test]
    fn full_grid_covers_every_point() {
        let g = GridSpec::new(128).unwrap();
        let locs = grid_schedule(128).locations_at(&g, 3).unwrap();
        assert_eq!(locs.len(), 128 * 128);
        let set: std::collections::HashSet<_> = locs.into_iter().collect();
        assert_eq!(set.len(), 128 * 128);
    }

    #[test]
    fn coarse_grid_is_centred() {
        let g = GridSpec::new(64).unwrap();
        let locs = grid_schedule(4).locations_at(&g, 1).unwrap();
        let xs: Vec<usize> = locs.iter().step_by(4).map(|p| p.x).collect();
        assert_eq!(xs, vec![8, 24, 40, 56]);
        assert_eq!(grid_schedule(2).locations_at(&g, 1).unwrap().len(), 4);
        assert!(grid_schedule(65).locations_at(&g, 1).is_err());
    }

    #[test]
    fn strip_cycles() {
        let g = GridSpec::new(128).unwrap();
        let s = ObservationSchedule {
            kind: ScheduleKind::MovingStrip { width: 2, x_positions: DEFAULT_STRIP_CYCLE.to_vec() },
            r: 10,
            sigma_obs: 0.05,
        };
        let l1 = s.locations_at(&g, 1).unwrap();
        assert_eq!(l1.len(), 256);
        assert!(l1.iter().all(|p| p.x == 10 || p.x == 11));
        assert_eq!(s.locations_at(&g, 9).unwrap(), l1);
        assert!(s.locations_at(&g, 2).unwrap().iter().all(|p| p.x == 90 || p.x == 91));
        assert_eq!(scaled_strip_cycle(64), vec![5, 45, 20, 60, 35, 10, 50, 25]);
    }

    #[test]
    fn noiseless_observations_are_exact_and_maximal() {
        let g = GridSpec::new(8).unwrap();
        let mut s = StaggeredState::rest(&g, 1.0);
        s.eta[[3, 4]] = 2.5;
        let locs = grid_schedule(8).locations_at(&g, 1).unwrap();
        let b = synthesize(&s, 1, locs, 0.0, &mut stream(1, &[])).unwrap();
        assert!(b.values.contains(&2.5));
        let b = ObservationBatch { sigma: 0.1, ..b };
        assert_eq!(global_log_likelihood(&s, &b), 0.0);
    }

    #[test]
    fn one_sigma_residual_gives_minus_half() {
        let g = GridSpec::new(4).unwrap();
        let s = StaggeredState::rest(&g, 1.0);
        let b = ObservationBatch { k: 1, locations: vec![GridPoint { x: 2, y: 2 }], values: vec![1.3], sigma: 0.3 };
        assert_abs_diff_eq!(global_log_likelihood(&s, &b), -0.5, epsilon = 1e-14);
    }

    #[test]
    fn csv_round_trip() {
        let b = ObservationBatch {
            k: 4,
            locations: vec![GridPoint { x: 1, y: 2 }, GridPoint { x: 3, y: 4 }],
            values: vec![0.25, -1.5],
            sigma: 0.05,
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        write_batch(&mut w, &b).unwrap();
        let bytes = w.into_inner().unwrap();
        assert!(String::from_utf8(bytes.clone()).unwrap().starts_with("k,x_index,y_index,value\n"));
        assert_eq!(read_batches(&bytes[..], 0.05).unwrap(), vec![b]);
    }
}
