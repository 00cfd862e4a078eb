//! Localized particle filter: per-region likelihoods with distance-damped
//! external observations, independent tempering in each region, and
//! reconstruction of global particles by interpolating across overlaps.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{ess, normalize_weights, temper, Ensemble, Rejuvenator, StreamKey, TemperingConfig, WorkingParticle};
use crate::grid::{
    region_distance, restrict_field, Component, Decomposition, FieldBlock, GridSpec, IndexBox, Piece, StaggeredState,
};
use crate::observations::{BlockView, GridPoint, ObservationBatch};

#[derive(Debug, Clone)]
pub struct LocalizationConfig {
    /// Damping rate of observations outside a region.
    pub alpha: f64,
    pub decomposition: Decomposition,
}

/// 1 inside the box, `exp(-alpha * distance)` outside.
pub fn gaspari_cohn(bbox: &IndexBox, p: GridPoint, alpha: f64, grid: &GridSpec, wrap_ew: bool) -> f64 {
    if bbox.contains(grid, p.x, p.y) {
        return 1.0;
    }
    if alpha == 0.0 {
        return 1.0;
    }
    (-alpha * region_distance(bbox, p.x, p.y, grid, wrap_ew)).exp()
}

/// The region whose block supplies observation `s` when evaluating region
/// `j`: `j` itself if it contains the point, otherwise the lowest-indexed
/// region that does.
pub fn assign_region(s: usize, j: usize, inside: &[Vec<bool>]) -> Result<usize> {
    if inside[j][s] {
        return Ok(j);
    }
    inside
        .iter()
        .position(|r| r[s])
        .ok_or(Error::Uncovered { x: 0, y: 0 })
}

/// Observation bookkeeping for one batch: membership, owners and damping.
#[derive(Debug, Clone)]
pub struct ObservationLayout {
    /// `inside[j][s]`: observation `s` lies in region `j`'s box.
    pub inside: Vec<Vec<bool>>,
    /// `owner[j][s]`: region whose frozen block region `j` reads for `s`.
    pub owner: Vec<Vec<usize>>,
    /// `rho[j][s]`: damping factor.
    pub rho: Vec<Vec<f64>>,
}

impl ObservationLayout {
    pub fn new(loc: &LocalizationConfig, batch: &ObservationBatch) -> Result<Self> {
        let dec = &loc.decomposition;
        let g = &dec.grid;
        let inside: Vec<Vec<bool>> = dec
            .boxes
            .iter()
            .map(|b| batch.locations.iter().map(|p| b.contains(g, p.x, p.y)).collect())
            .collect();
        let owner = (0..dec.n_loc)
            .map(|j| {
                (0..batch.len())
                    .map(|s| {
                        assign_region(s, j, &inside).map_err(|_| {
                            let p = batch.locations[s];
                            Error::Uncovered { x: p.x, y: p.y }
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let rho = dec
            .boxes
            .iter()
            .map(|b| {
                batch
                    .locations
                    .iter()
                    .map(|&p| gaspari_cohn(b, p, loc.alpha, g, dec.wrap_ew))
                    .collect()
            })
            .collect();
        Ok(Self { inside, owner, rho })
    }
}

/// Local blocks per region plus the read-only copy taken at the split.
#[derive(Debug, Clone)]
pub struct LocalEnsembleSet {
    /// `blocks[j][i]`: particle `i` restricted to region `j`.
    pub blocks: Vec<Vec<WorkingParticle>>,
    pub frozen: Vec<Vec<FieldBlock>>,
}

impl LocalEnsembleSet {
    pub fn split(ens: &Ensemble, dec: &Decomposition) -> Result<Self> {
        let blocks: Vec<Vec<WorkingParticle>> = dec
            .boxes
            .iter()
            .map(|&b| {
                ens.particles
                    .iter()
                    .zip(&ens.histories)
                    .enumerate()
                    .map(|(i, (p, h))| {
                        Ok(WorkingParticle { block: restrict_field(p, b, &dec.grid)?, history: h.clone(), origin: i })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let frozen = blocks.iter().map(|r| r.iter().map(|w| w.block.clone()).collect()).collect();
        Ok(Self { blocks, frozen })
    }
}

/// The damped squared-residual sum over observations outside region `j`,
/// read from the frozen blocks of member `i`. A resampled particle keeps
/// reading the blocks of the member it descends from.
fn external_part(j: usize, i: usize, set: &LocalEnsembleSet, layout: &ObservationLayout, batch: &ObservationBatch, grid: &GridSpec) -> f64 {
    let acc: f64 = (0..batch.len())
        .filter(|&s| !layout.inside[j][s])
        .map(|s| {
            let blk = &set.frozen[layout.owner[j][s]][i];
            layout.rho[j][s] * batch.residual_sq(s, &BlockView { grid, block: blk })
        })
        .sum();
    -0.5 * acc / (batch.sigma * batch.sigma)
}

fn own_part(j: usize, block: &FieldBlock, layout: &ObservationLayout, batch: &ObservationBatch, grid: &GridSpec) -> f64 {
    let view = BlockView { grid, block };
    let acc: f64 = (0..batch.len())
        .filter(|&s| layout.inside[j][s])
        .map(|s| layout.rho[j][s] * batch.residual_sq(s, &view))
        .sum();
    -0.5 * acc / (batch.sigma * batch.sigma)
}

/// Local log-likelihood of particle `i` in region `j` with `own` as its
/// current block.
pub fn local_log_likelihood(
    j: usize,
    i: usize,
    own: &FieldBlock,
    set: &LocalEnsembleSet,
    layout: &ObservationLayout,
    batch: &ObservationBatch,
    grid: &GridSpec,
) -> f64 {
    own_part(j, own, layout, batch, grid) + external_part(j, i, set, layout, batch, grid)
}

/// Local weights of region `j`, normalised over particles.
pub fn local_weights(
    j: usize,
    set: &LocalEnsembleSet,
    layout: &ObservationLayout,
    batch: &ObservationBatch,
    grid: &GridSpec,
    prior_log_w: &[f64],
) -> Result<Vec<f64>> {
    let lw: Vec<f64> = set.blocks[j]
        .iter()
        .enumerate()
        .map(|(i, p)| prior_log_w[i] + local_log_likelihood(j, i, &p.block, set, layout, batch, grid))
        .collect();
    normalize_weights(&lw)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if a == b {
        a
    } else {
        (1.0 - t) * a + t * b
    }
}

/// Linear blend across columns: the east-most column equals `east`, the
/// west-most `west`.
pub fn interp_ew(east: &Array2<f64>, west: &Array2<f64>) -> Result<Array2<f64>> {
    let (w, h) = east.dim();
    if west.dim() != (w, h) || w < 2 {
        return Err(Error::InvalidArgument(format!("cannot interpolate {:?} with {:?}", east.dim(), west.dim())));
    }
    Ok(Array2::from_shape_fn((w, h), |(a, b)| {
        lerp(west[[a, b]], east[[a, b]], a as f64 / (w - 1) as f64)
    }))
}

/// Linear blend across rows: the south-most row equals `south`, the
/// north-most `north`.
pub fn interp_sn(south: &Array2<f64>, north: &Array2<f64>) -> Result<Array2<f64>> {
    let (w, h) = south.dim();
    if north.dim() != (w, h) || h < 2 {
        return Err(Error::InvalidArgument(format!("cannot interpolate {:?} with {:?}", south.dim(), north.dim())));
    }
    Ok(Array2::from_shape_fn((w, h), |(a, b)| {
        lerp(south[[a, b]], north[[a, b]], b as f64 / (h - 1) as f64)
    }))
}

fn extract(block: &FieldBlock, piece: &IndexBox, c: Component, grid: &GridSpec) -> Result<Array2<f64>> {
    let (w, h) = (piece.width(), piece.height());
    let mut out = Array2::zeros((w, h));
    for a in 0..w {
        let ix = grid.wrap_x(piece.x0 + a as isize);
        for b in 0..h {
            out[[a, b]] = block
                .get(grid, c, ix, piece.y0 + b)
                .ok_or_else(|| Error::OutOfRange(format!("block {:?} lacks ({ix}, {})", block.bbox, piece.y0 + b)))?;
        }
    }
    Ok(out)
}

/// Rebuild one global particle from its region blocks (indexed by region).
pub fn merge_global(blocks: &[&FieldBlock], dec: &Decomposition) -> Result<StaggeredState> {
    if blocks.len() != dec.n_loc {
        return Err(Error::InvalidArgument(format!("{} blocks for {} regions", blocks.len(), dec.n_loc)));
    }
    let grid = &dec.grid;
    let mut out = StaggeredState::zeros(grid);
    for (piece, kind) in dec.pieces() {
        if piece.is_empty() {
            continue;
        }
        for c in Component::ALL {
            let get = |r: usize| extract(blocks[r], &piece, c, grid);
            let values = match kind {
                Piece::Core(r) => get(r)?,
                Piece::EastWest { west, east } => interp_ew(&get(east)?, &get(west)?)?,
                Piece::SouthNorth { south, north } => interp_sn(&get(south)?, &get(north)?)?,
                Piece::Corner { nw, ne, se, sw } => {
                    let south = interp_ew(&get(se)?, &get(sw)?)?;
                    let north = interp_ew(&get(ne)?, &get(nw)?)?;
                    interp_sn(&south, &north)?
                }
            };
            let dst = out.component_mut(c);
            for ((a, b), &x) in values.indexed_iter() {
                dst[[grid.wrap_x(piece.x0 + a as isize), piece.y0 + b]] = x;
            }
        }
    }
    out.apply_boundary_conditions();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionReport {
    pub region: usize,
    pub ess: f64,
    pub tempering_steps: usize,
    pub mcmc_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpfReport {
    pub k: usize,
    pub ess_before: f64,
    pub resampled: bool,
    pub regions: Vec<RegionReport>,
}

impl LpfReport {
    pub fn mean_tempering_steps(&self) -> f64 {
        if self.regions.is_empty() {
            return 0.0;
        }
        self.regions.iter().map(|r| r.tempering_steps as f64).sum::<f64>() / self.regions.len() as f64
    }

    pub fn mean_mcmc(&self) -> f64 {
        if self.regions.is_empty() {
            return 0.0;
        }
        self.regions.iter().map(|r| r.mcmc_mean).sum::<f64>() / self.regions.len() as f64
    }
}

/// Global ESS gate, then independent tempering per region against frozen
/// external blocks, then merge and reset weights.
pub fn lpf_assimilate(
    ens: &mut Ensemble,
    batch: &ObservationBatch,
    loc: &LocalizationConfig,
    rejuv: &Rejuvenator,
    cfg: &TemperingConfig,
    seed: u64,
) -> Result<LpfReport> {
    let w = ens.updated_weights(batch)?;
    let ess_before = ess(&w);
    let mut report = LpfReport { k: batch.k, ess_before, resampled: false, regions: Vec::new() };
    if ess_before >= cfg.n_ess {
        ens.weights = w;
        return Ok(report);
    }
    let dec = &loc.decomposition;
    let grid = &dec.grid;
    let layout = ObservationLayout::new(loc, batch)?;
    let mut set = LocalEnsembleSet::split(ens, dec)?;
    let prior = ens.log_weights();

    let mut work = std::mem::take(&mut set.blocks);
    let shared = &set;
    let regions: Vec<RegionReport> = work
        .par_iter_mut()
        .enumerate()
        .map(|(j, particles)| {
            let ext: Vec<f64> = (0..particles.len())
                .map(|i| external_part(j, i, shared, &layout, batch, grid))
                .collect();
            let f = |_: usize, p: &WorkingParticle| own_part(j, &p.block, &layout, batch, grid) + ext[p.origin];
            let lw: Vec<f64> = particles.iter().enumerate().map(|(i, p)| prior[i] + f(i, p)).collect();
            let region_ess = ess(&normalize_weights(&lw)?);
            if region_ess >= cfg.n_ess {
                return Ok(RegionReport { region: j, ess: region_ess, tempering_steps: 0, mcmc_mean: 0.0 });
            }
            let t = temper(particles, &prior, f, rejuv, cfg, StreamKey { seed, k: batch.k, region: j })?;
            Ok(RegionReport { region: j, ess: region_ess, tempering_steps: t.iterations, mcmc_mean: t.mcmc_mean })
        })
        .collect::<Result<_>>()?;

    for i in 0..ens.len() {
        let blocks: Vec<&FieldBlock> = work.iter().map(|r| &r[i].block).collect();
        ens.particles[i] = merge_global(&blocks, dec)?;
        ens.histories[i] = if dec.n_loc == 1 { work[0][i].history.clone() } else { None };
    }
    ens.reset_weights();
    report.resampled = true;
    report.regions = regions;
    Ok(report)
}
