//! Staggered C-grid on the unit square, boundary conditions and the
//! overlapping domain decomposition used by the localized filter.
//!
//! Arrays have shape `(d + 2, d + 2)` and are indexed `[[i, j]]` with `i`
//! along x (east) and `j` along y (north); index 0 and `d + 1` are ghosts.
//! Interior cells are `1..=d` on both axes. Positions:
//!
//! * eta at cell centres `((i - 1/2) dx, (j - 1/2) dx)`,
//! * u on east faces `(i dx, (j - 1/2) dx)`,
//! * v on north faces `((i - 1/2) dx, j dx)`; `v[.., 0]` and `v[.., d]` sit on
//!   the south and north walls.

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    d: usize,
}

impl GridSpec {
    pub fn new(d: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::InvalidArgument(format!("grid needs d >= 2, got {d}")));
        }
        Ok(Self { d })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.d as f64
    }

    /// Array extent per axis including ghosts.
    pub fn extent(&self) -> usize {
        self.d + 2
    }

    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        let dx = self.dx();
        ((i as f64 - 0.5) * dx, (j as f64 - 0.5) * dx)
    }

    pub fn u_point(&self, i: usize, j: usize) -> (f64, f64) {
        let dx = self.dx();
        (i as f64 * dx, (j as f64 - 0.5) * dx)
    }

    pub fn v_point(&self, i: usize, j: usize) -> (f64, f64) {
        let dx = self.dx();
        ((i as f64 - 0.5) * dx, j as f64 * dx)
    }

    /// Map any x index onto the periodic interior range `1..=d`.
    pub fn wrap_x(&self, ix: isize) -> usize {
        (ix - 1).rem_euclid(self.d as isize) as usize + 1
    }

    pub fn interior_box(&self) -> IndexBox {
        IndexBox::new(1, self.d as isize, 1, self.d)
    }
}

/// Which prognostic variable a stencil or norm refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    U,
    V,
    Eta,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::U, Component::V, Component::Eta];

    pub fn name(self) -> &'static str {
        match self {
            Component::U => "u",
            Component::V => "v",
            Component::Eta => "eta",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaggeredState {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    pub eta: Array2<f64>,
}

impl StaggeredState {
    pub fn zeros(grid: &GridSpec) -> Self {
        let n = grid.extent();
        Self {
            u: Array2::zeros((n, n)),
            v: Array2::zeros((n, n)),
            eta: Array2::zeros((n, n)),
        }
    }

    /// Rest state: zero velocity and uniform height `h`.
    pub fn rest(grid: &GridSpec, h: f64) -> Self {
        let mut s = Self::zeros(grid);
        s.eta.fill(h);
        s
    }

    pub fn d(&self) -> usize {
        self.eta.nrows() - 2
    }

    pub fn component(&self, c: Component) -> &Array2<f64> {
        match c {
            Component::U => &self.u,
            Component::V => &self.v,
            Component::Eta => &self.eta,
        }
    }

    pub fn component_mut(&mut self, c: Component) -> &mut Array2<f64> {
        match c {
            Component::U => &mut self.u,
            Component::V => &mut self.v,
            Component::Eta => &mut self.eta,
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.u, &self.v, &self.eta]
            .iter()
            .all(|a| a.iter().all(|x| x.is_finite()))
    }

    /// Total interior height, `sum eta dx^2`.
    pub fn mass(&self) -> f64 {
        let d = self.d();
        let dx = 1.0 / d as f64;
        let mut m = 0.0;
        for i in 1..=d {
            for j in 1..=d {
                m += self.eta[[i, j]];
            }
        }
        m * dx * dx
    }

    /// `self += a * other` over whole arrays.
    pub fn axpy(&mut self, a: f64, other: &StaggeredState) {
        self.u.scaled_add(a, &other.u);
        self.v.scaled_add(a, &other.v);
        self.eta.scaled_add(a, &other.eta);
    }

    /// Periodic east-west, free-slip walls north and south.
    ///
    /// Idempotent: ghosts and wall values are pure functions of interior data.
    pub fn apply_boundary_conditions(&mut self) {
        let d = self.d();
        for a in [&mut self.u, &mut self.v, &mut self.eta] {
            for j in 0..d + 2 {
                a[[0, j]] = a[[d, j]];
                a[[d + 1, j]] = a[[1, j]];
            }
        }
        for i in 0..d + 2 {
            self.eta[[i, 0]] = self.eta[[i, 1]];
            self.eta[[i, d + 1]] = self.eta[[i, d]];
            self.u[[i, 0]] = self.u[[i, 1]];
            self.u[[i, d + 1]] = self.u[[i, d]];
            self.v[[i, 0]] = 0.0;
            self.v[[i, d]] = 0.0;
            self.v[[i, d + 1]] = -self.v[[i, d - 1]];
        }
    }
}

/// Inclusive rectangle of interior indices. The x range may run past `1..=d`
/// when the box wraps around the periodic direction; y never wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexBox {
    pub x0: isize,
    pub x1: isize,
    pub y0: usize,
    pub y1: usize,
}

impl IndexBox {
    pub fn new(x0: isize, x1: isize, y0: usize, y1: usize) -> Self {
        Self { x0, x1, y0, y1 }
    }

    pub fn width(&self) -> usize {
        (self.x1 - self.x0 + 1).max(0) as usize
    }

    pub fn height(&self) -> usize {
        (self.y1 + 1).saturating_sub(self.y0)
    }

    pub fn len(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Column of interior index `ix` inside the box, resolving periodic images.
    pub fn column(&self, grid: &GridSpec, ix: usize) -> Option<usize> {
        let off = (ix as isize - self.x0).rem_euclid(grid.d() as isize) as usize;
        (off < self.width()).then_some(off)
    }

    pub fn row(&self, iy: usize) -> Option<usize> {
        (iy >= self.y0 && iy <= self.y1).then(|| iy - self.y0)
    }

    pub fn contains(&self, grid: &GridSpec, ix: usize, iy: usize) -> bool {
        self.row(iy).is_some() && self.column(grid, ix).is_some()
    }

    /// Interior indices covered by the box, x outer, y inner.
    pub fn points<'a>(&'a self, grid: &'a GridSpec) -> impl Iterator<Item = (usize, usize)> + 'a {
        (self.x0..=self.x1)
            .flat_map(move |x| (self.y0..=self.y1).map(move |y| (grid.wrap_x(x), y)))
    }

    fn validate(&self, grid: &GridSpec) -> Result<()> {
        if self.is_empty() || self.y0 < 1 || self.y1 > grid.d() || self.width() > grid.d() {
            return Err(Error::OutOfRange(format!("{self:?} on a grid with d = {}", grid.d())));
        }
        Ok(())
    }
}

/// A copy of the three fields over an [`IndexBox`], shape `(width, height)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldBlock {
    pub bbox: IndexBox,
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    pub eta: Array2<f64>,
}

impl FieldBlock {
    pub fn component(&self, c: Component) -> &Array2<f64> {
        match c {
            Component::U => &self.u,
            Component::V => &self.v,
            Component::Eta => &self.eta,
        }
    }

    pub fn component_mut(&mut self, c: Component) -> &mut Array2<f64> {
        match c {
            Component::U => &mut self.u,
            Component::V => &mut self.v,
            Component::Eta => &mut self.eta,
        }
    }

    /// Value at global interior point, if the box covers it.
    pub fn get(&self, grid: &GridSpec, c: Component, ix: usize, iy: usize) -> Option<f64> {
        let a = self.bbox.column(grid, ix)?;
        let b = self.bbox.row(iy)?;
        Some(self.component(c)[[a, b]])
    }
}

pub fn restrict_field(state: &StaggeredState, bbox: IndexBox, grid: &GridSpec) -> Result<FieldBlock> {
    bbox.validate(grid)?;
    let (w, h) = (bbox.width(), bbox.height());
    let take = |src: &Array2<f64>| {
        Array2::from_shape_fn((w, h), |(a, b)| {
            src[[grid.wrap_x(bbox.x0 + a as isize), bbox.y0 + b]]
        })
    };
    Ok(FieldBlock {
        bbox,
        u: take(&state.u),
        v: take(&state.v),
        eta: take(&state.eta),
    })
}

/// Copy a block back into the interior of `state`. Ghosts are left stale.
pub fn write_block(state: &mut StaggeredState, block: &FieldBlock, grid: &GridSpec) {
    let bbox = block.bbox;
    for c in Component::ALL {
        let src = block.component(c);
        let dst = state.component_mut(c);
        for ((a, b), &x) in src.indexed_iter() {
            dst[[grid.wrap_x(bbox.x0 + a as isize), bbox.y0 + b]] = x;
        }
    }
}

/// Euclidean distance from `(px, py)` to the rectangle `[x0, x1] x [y0, y1]`,
/// minimised over periodic images in x when `period` is given.
pub fn rect_point_distance(
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    px: f64,
    py: f64,
    period: Option<f64>,
) -> f64 {
    let gap = |lo: f64, hi: f64, p: f64| (lo - p).max(p - hi).max(0.0);
    let gy = gap(y0, y1, py);
    let images: &[f64] = if period.is_some() { &[-1.0, 0.0, 1.0] } else { &[0.0] };
    let l = period.unwrap_or(0.0);
    images
        .iter()
        .map(|k| gap(x0, x1, px + k * l).hypot(gy))
        .fold(f64::INFINITY, f64::min)
}

/// Physical distance from interior cell `(ix, iy)` to a box, using cell centres.
pub fn region_distance(bbox: &IndexBox, ix: usize, iy: usize, grid: &GridSpec, wrap_ew: bool) -> f64 {
    let dx = grid.dx();
    let c = |k: f64| (k - 0.5) * dx;
    rect_point_distance(
        c(bbox.x0 as f64),
        c(bbox.x1 as f64),
        c(bbox.y0 as f64),
        c(bbox.y1 as f64),
        c(ix as f64),
        c(iy as f64),
        wrap_ew.then_some(1.0),
    )
}

/// An overlap strip or corner and the regions sharing it.
///
/// Owners are `[west, east]` for east-west strips, `[south, north]` for
/// north-south strips and `[nw, ne, se, sw]` for corners.
#[derive(Debug, Clone, PartialEq)]
pub struct Overlap {
    pub bbox: IndexBox,
    pub owners: Vec<usize>,
}

/// Square decomposition into `c x c` base regions, each extended by
/// `halfwidth` points. Region `j = bx * c + by` with `bx` counting eastwards
/// and `by` northwards.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub grid: GridSpec,
    pub n_loc: usize,
    pub per_axis: usize,
    pub halfwidth: usize,
    pub wrap_ew: bool,
    pub boxes: Vec<IndexBox>,
    pub cores: Vec<IndexBox>,
    pub ew_overlaps: Vec<Overlap>,
    pub sn_overlaps: Vec<Overlap>,
    pub corners: Vec<Overlap>,
}

/// One axis segment of the partition: a core of one base interval or a band
/// shared by two neighbours.
#[derive(Debug, Clone, Copy)]
enum Segment {
    Core { idx: usize, lo: isize, hi: isize },
    Band { lower: usize, upper: usize, lo: isize, hi: isize },
}

fn axis_segments(d: usize, c: usize, h: usize, periodic: bool) -> Vec<Segment> {
    let m = (d / c) as isize;
    let h = h as isize;
    let shared = c > 1 && h > 0;
    let mut out = Vec::new();
    for b in 0..c {
        let first = b as isize * m + 1;
        let last = (b as isize + 1) * m;
        let lo = if shared && (b > 0 || periodic) { first + h } else { first };
        let hi = if shared && (b + 1 < c || periodic) { last - h } else { last };
        out.push(Segment::Core { idx: b, lo, hi });
        if shared && (b + 1 < c || periodic) {
            out.push(Segment::Band {
                lower: b,
                upper: (b + 1) % c,
                lo: last - h + 1,
                hi: last + h,
            });
        }
    }
    out
}

impl Decomposition {
    pub fn new(grid: GridSpec, n_loc: usize, halfwidth: usize, wrap_ew: bool) -> Result<Self> {
        let d = grid.d();
        let c = (n_loc as f64).sqrt().round() as usize;
        if n_loc == 0 || c * c != n_loc {
            return Err(Error::Decomposition(format!("n_loc = {n_loc} is not a perfect square")));
        }
        if d % c != 0 {
            return Err(Error::Decomposition(format!("{c} regions per axis do not divide d = {d}")));
        }
        let m = d / c;
        if c > 1 && 2 * halfwidth >= m {
            return Err(Error::Decomposition(format!(
                "overlap half-width {halfwidth} too large for base squares of side {m}"
            )));
        }
        let h = if c > 1 { halfwidth } else { 0 };
        let (mi, hi) = (m as isize, h as isize);

        let mut boxes = Vec::with_capacity(n_loc);
        for bx in 0..c {
            for by in 0..c {
                let (bx, by) = (bx as isize, by as isize);
                let (mut x0, mut x1) = (bx * mi + 1 - hi, (bx + 1) * mi + hi);
                if !wrap_ew {
                    x0 = x0.max(1);
                    x1 = x1.min(d as isize);
                }
                let y0 = (by * mi + 1 - hi).max(1) as usize;
                let y1 = ((by + 1) * mi + hi).min(d as isize) as usize;
                boxes.push(IndexBox::new(x0, x1, y0, y1));
            }
        }

        let xs = axis_segments(d, c, h, wrap_ew);
        let ys = axis_segments(d, c, h, false);
        let id = |bx: usize, by: usize| bx * c + by;
        let (mut cores, mut ew, mut sn, mut corners) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        cores.resize(n_loc, IndexBox::new(1, 0, 1, 0));
        for xseg in &xs {
            for yseg in &ys {
                match (*xseg, *yseg) {
                    (Segment::Core { idx: bx, lo: x0, hi: x1 }, Segment::Core { idx: by, lo, hi }) => {
                        cores[id(bx, by)] = IndexBox::new(x0, x1, lo as usize, hi as usize);
                    }
                    (Segment::Band { lower, upper, lo: x0, hi: x1 }, Segment::Core { idx: by, lo, hi }) => {
                        ew.push(Overlap {
                            bbox: IndexBox::new(x0, x1, lo as usize, hi as usize),
                            owners: vec![id(lower, by), id(upper, by)],
                        });
                    }
                    (Segment::Core { idx: bx, lo: x0, hi: x1 }, Segment::Band { lower, upper, lo, hi }) => {
                        sn.push(Overlap {
                            bbox: IndexBox::new(x0, x1, lo as usize, hi as usize),
                            owners: vec![id(bx, lower), id(bx, upper)],
                        });
                    }
                    (
                        Segment::Band { lower: w, upper: e, lo: x0, hi: x1 },
                        Segment::Band { lower: s, upper: n, lo, hi },
                    ) => {
                        corners.push(Overlap {
                            bbox: IndexBox::new(x0, x1, lo as usize, hi as usize),
                            owners: vec![id(w, n), id(e, n), id(e, s), id(w, s)],
                        });
                    }
                }
            }
        }

        Ok(Self {
            grid,
            n_loc,
            per_axis: c,
            halfwidth: h,
            wrap_ew,
            boxes,
            cores,
            ew_overlaps: ew,
            sn_overlaps: sn,
            corners,
        })
    }

    pub fn base_side(&self) -> usize {
        self.grid.d() / self.per_axis
    }

    /// Side of an extended box before clamping at the walls.
    pub fn nominal_box_side(&self) -> usize {
        self.base_side() + 2 * self.halfwidth
    }

    /// Overlap fraction `halfwidth / base side`.
    pub fn overlap_fraction(&self) -> f64 {
        self.halfwidth as f64 / self.base_side() as f64
    }

    /// Regions whose extended box contains the interior point, ascending.
    pub fn regions_containing(&self, ix: usize, iy: usize) -> Vec<usize> {
        (0..self.n_loc)
            .filter(|&j| self.boxes[j].contains(&self.grid, ix, iy))
            .collect()
    }

    /// All partition pieces: cores, strips and corners.
    pub fn pieces(&self) -> impl Iterator<Item = (IndexBox, Piece)> + '_ {
        let cores = self.cores.iter().enumerate().map(|(j, b)| (*b, Piece::Core(j)));
        let ew = self.ew_overlaps.iter().map(|o| (o.bbox, Piece::EastWest { west: o.owners[0], east: o.owners[1] }));
        let sn = self.sn_overlaps.iter().map(|o| (o.bbox, Piece::SouthNorth { south: o.owners[0], north: o.owners[1] }));
        let corners = self.corners.iter().map(|o| {
            let [nw, ne, se, sw] = [o.owners[0], o.owners[1], o.owners[2], o.owners[3]];
            (o.bbox, Piece::Corner { nw, ne, se, sw })
        });
        cores.chain(ew).chain(sn).chain(corners)
    }
}

/// A partition piece and the regions that own it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Piece {
    Core(usize),
    EastWest { west: usize, east: usize },
    SouthNorth { south: usize, north: usize },
    Corner { nw: usize, ne: usize, se: usize, sw: usize },
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn state_with_pattern(grid: &GridSpec) -> StaggeredState {
        let mut s = StaggeredState::zeros(grid);
        for ((i, j), x) in s.eta.indexed_iter_mut() {
            *x = 1.0 + 0.01 * i as f64 + 0.001 * j as f64;
        }
        for ((i, j), x) in s.u.indexed_iter_mut() {
            *x = (i * 7 + j * 3) as f64 * 0.1;
        }
        for ((i, j), x) in s.v.indexed_iter_mut() {
            *x = (i as f64 - j as f64) * 0.2;
        }
        s
    }

    #[test]
    fn boundary_conditions_are_idempotent() {
        let g = GridSpec::new(8).unwrap();
        let mut s = state_with_pattern(&g);
        s.apply_boundary_conditions();
        let once = s.clone();
        s.apply_boundary_conditions();
        assert_eq!(s, once);
    }

    #[test]
    fn rest_state_satisfies_boundary_conditions() {
        let g = GridSpec::new(8).unwrap();
        let mut s = StaggeredState::rest(&g, 1.0);
        let before = s.clone();
        s.apply_boundary_conditions();
        assert_eq!(s, before);
    }

    #[test]
    fn walls_and_periodicity() {
        let g = GridSpec::new(6).unwrap();
        let mut s = state_with_pattern(&g);
        s.apply_boundary_conditions();
        for i in 0..8 {
            assert_eq!(s.v[[i, 0]], 0.0);
            assert_eq!(s.v[[i, 6]], 0.0);
            assert_eq!(s.eta[[i, 0]], s.eta[[i, 1]]);
        }
        for j in 0..8 {
            assert_eq!(s.u[[0, j]], s.u[[6, j]]);
            assert_eq!(s.eta[[7, j]], s.eta[[1, j]]);
        }
    }

    #[test]
    fn restrict_single_point() {
        let g = GridSpec::new(3).unwrap();
        let s = state_with_pattern(&g);
        let b = restrict_field(&s, IndexBox::new(1, 1, 1, 1), &g).unwrap();
        assert_eq!(b.eta.dim(), (1, 1));
        assert_eq!(b.eta[[0, 0]], s.eta[[1, 1]]);
    }

    #[test]
    fn restrict_rejects_bad_boxes() {
        let g = GridSpec::new(4).unwrap();
        let s = StaggeredState::zeros(&g);
        assert!(restrict_field(&s, IndexBox::new(1, 2, 0, 2), &g).is_err());
        assert!(restrict_field(&s, IndexBox::new(1, 2, 1, 5), &g).is_err());
        assert!(restrict_field(&s, IndexBox::new(-3, 3, 1, 2), &g).is_err());
    }

    #[test]
    fn wrapped_restrict_reads_periodic_images() {
        let g = GridSpec::new(8).unwrap();
        let s = state_with_pattern(&g);
        let b = restrict_field(&s, IndexBox::new(-1, 2, 1, 8), &g).unwrap();
        assert_eq!(b.eta[[0, 0]], s.eta[[7, 1]]);
        assert_eq!(b.eta[[1, 0]], s.eta[[8, 1]]);
        assert_eq!(b.eta[[2, 0]], s.eta[[1, 1]]);
    }

    #[test]
    fn restrict_then_write_back_is_identity() {
        let g = GridSpec::new(8).unwrap();
        let s = state_with_pattern(&g);
        let b = restrict_field(&s, IndexBox::new(-2, 3, 2, 7), &g).unwrap();
        let mut t = s.clone();
        write_block(&mut t, &b, &g);
        assert_eq!(s, t);
    }

    #[test]
    fn distance_examples() {
        assert_abs_diff_eq!(rect_point_distance(0.0, 0.5, 0.0, 0.5, 0.75, 0.25, None), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(rect_point_distance(0.0, 0.5, 0.0, 0.5, 0.9, 0.25, Some(1.0)), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(rect_point_distance(0.0, 0.5, 0.0, 0.5, 0.9, 0.25, None), 0.4, epsilon = 1e-15);
        assert_eq!(rect_point_distance(0.0, 0.5, 0.0, 0.5, 0.2, 0.3, None), 0.0);
    }

    #[test]
    fn single_region_is_whole_interior() {
        let g = GridSpec::new(128).unwrap();
        let dec = Decomposition::new(g, 1, 0, true).unwrap();
        assert_eq!(dec.boxes, vec![g.interior_box()]);
        assert_eq!(dec.cores, vec![g.interior_box()]);
        assert!(dec.ew_overlaps.is_empty() && dec.corners.is_empty());
    }

    #[test]
    fn decomposition_errors() {
        let g = GridSpec::new(128).unwrap();
        assert!(Decomposition::new(g, 9, 2, true).is_err());
        assert!(Decomposition::new(g, 5, 2, true).is_err());
        assert!(Decomposition::new(g, 4, 32, true).is_err());
    }

    #[test]
    fn boxes_wrap_east_west_and_clamp_at_walls() {
        let g = GridSpec::new(128).unwrap();
        let dec = Decomposition::new(g, 4, 6, true).unwrap();
        assert_eq!(dec.boxes[0], IndexBox::new(-5, 70, 1, 70));
        assert_eq!(dec.boxes[3], IndexBox::new(59, 134, 59, 128));
        let open = Decomposition::new(g, 4, 6, false).unwrap();
        assert_eq!(open.boxes[0], IndexBox::new(1, 70, 1, 70));
    }

    #[test]
    fn corners_are_owned_by_four_regions() {
        let g = GridSpec::new(48).unwrap();
        let dec = Decomposition::new(g, 9, 3, true).unwrap();
        for c in &dec.corners {
            let (ix, iy) = c.bbox.points(&g).next().unwrap();
            let mut owners = c.owners.clone();
            owners.sort();
            assert_eq!(owners, dec.regions_containing(ix, iy));
        }
    }
}
