//! Periodic box geometry, point configurations and cell-list neighbor search.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Coordinate storage; inline for d <= 3.
pub type Coords = SmallVec<[f64; 3]>;

/// Stable handle of a particle inside a [`Configuration`].
pub type ParticleId = usize;

/// The periodic box `[0, side)^dim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Torus {
    dim: usize,
    side: f64,
}

impl Torus {
    pub fn new(dim: usize, side: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be at least 1".into()));
        }
        if !(side > 0.0 && side.is_finite()) {
            return Err(Error::InvalidParameter(format!("box side must be positive, got {side}")));
        }
        Ok(Torus { dim, side })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn half_side(&self) -> f64 {
        0.5 * self.side
    }

    pub fn volume(&self) -> f64 {
        self.side.powi(self.dim as i32)
    }

    /// Wraps a single coordinate into `[0, side)`.
    #[inline]
    pub fn wrap_coord(&self, x: f64) -> f64 {
        let mut w = x.rem_euclid(self.side);
        // rem_euclid can round up to `side` for tiny negative inputs
        if w >= self.side {
            w -= self.side;
        }
        w
    }

    pub fn wrap(&self, coords: &[f64]) -> Point {
        Point(coords.iter().map(|&x| self.wrap_coord(x)).collect())
    }

    /// Minimum-image representative of one coordinate difference, in `(-L/2, L/2]`.
    #[inline]
    pub fn min_image_coord(&self, dx: f64) -> f64 {
        let l = self.side;
        let mut d = dx - l * (dx / l).round();
        if d <= -0.5 * l {
            d += l;
        } else if d > 0.5 * l {
            d -= l;
        }
        d
    }

    /// Displacement `p - q` under the minimum-image convention.
    pub fn min_image(&self, p: &[f64], q: &[f64]) -> Displacement {
        let vector: Coords = p.iter().zip(q).map(|(a, b)| self.min_image_coord(a - b)).collect();
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        Displacement { vector, norm }
    }

    /// Minimum-image distance without building the vector.
    #[inline]
    pub fn distance(&self, p: &[f64], q: &[f64]) -> f64 {
        let mut s = 0.0;
        for (a, b) in p.iter().zip(q) {
            let d = self.min_image_coord(a - b);
            s += d * d;
        }
        s.sqrt()
    }

    /// `p + v`, wrapped.
    pub fn translate(&self, p: &[f64], v: &[f64]) -> Point {
        Point(p.iter().zip(v).map(|(a, b)| self.wrap_coord(a + b)).collect())
    }

    /// Uniform point on the torus.
    pub fn uniform_point<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Point {
        Point((0..self.dim).map(|_| self.wrap_coord(rng.random::<f64>() * self.side)).collect())
    }

    /// Mid-box point.
    pub fn center(&self) -> Point {
        Point((0..self.dim).map(|_| 0.5 * self.side).collect())
    }
}

/// A position on the torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point(pub Coords);

impl Point {
    pub fn new(coords: &[f64]) -> Self {
        Point(coords.iter().copied().collect())
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Deref for Point {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Minimum-image displacement vector and its Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Displacement {
    pub vector: Coords,
    pub norm: f64,
}

impl Displacement {
    pub fn from_vector(v: &[f64]) -> Self {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Displacement { vector: v.iter().copied().collect(), norm }
    }

    pub fn negated(&self) -> Self {
        Displacement { vector: self.vector.iter().map(|v| -v).collect(), norm: self.norm }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    point: Point,
    cell: usize,
    live_pos: usize,
}

/// A finite simple point configuration on a torus with a cell-list index.
///
/// Particles keep their id for as long as they live; ids of removed particles
/// are recycled.
#[derive(Debug, Clone)]
pub struct Configuration {
    torus: Torus,
    cell_size: f64,
    cells_per_axis: usize,
    cell_width: f64,
    slots: Vec<Option<Slot>>,
    free: Vec<ParticleId>,
    live: Vec<ParticleId>,
    cells: Vec<Vec<ParticleId>>,
}

impl Configuration {
    /// Empty configuration whose cells are at least `cell_size` wide.
    pub fn new(torus: Torus, cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0) {
            return Err(Error::InvalidParameter(format!("cell size must be positive, got {cell_size}")));
        }
        let cells_per_axis = ((torus.side / cell_size).floor() as usize).max(1);
        let n_cells = cells_per_axis
            .checked_pow(torus.dim as u32)
            .filter(|&n| n <= 1 << 24)
            .ok_or_else(|| Error::InvalidParameter("cell grid too large".into()))?;
        Ok(Configuration {
            torus,
            cell_size,
            cells_per_axis,
            cell_width: torus.side / cells_per_axis as f64,
            slots: Vec::new(),
            free: Vec::new(),
            live: Vec::new(),
            cells: vec![Vec::new(); n_cells],
        })
    }

    /// Builds a configuration from raw coordinates (wrapped on insertion).
    pub fn from_points<'a>(
        torus: Torus,
        cell_size: f64,
        points: impl IntoIterator<Item = &'a [f64]>,
    ) -> Result<Self> {
        let mut c = Configuration::new(torus, cell_size)?;
        for p in points {
            c.insert(torus.wrap(p))?;
        }
        Ok(c)
    }

    pub fn torus(&self) -> &Torus {
        &self.torus
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    /// Ids of live particles, in a deterministic order.
    pub fn ids(&self) -> &[ParticleId] {
        &self.live
    }

    pub fn contains(&self, id: ParticleId) -> bool {
        matches!(self.slots.get(id), Some(Some(_)))
    }

    pub fn point(&self, id: ParticleId) -> Option<&Point> {
        self.slots.get(id).and_then(|s| s.as_ref()).map(|s| &s.point)
    }

    /// Point of a particle known to be live.
    #[inline]
    pub fn pos(&self, id: ParticleId) -> &[f64] {
        &self.slots[id].as_ref().expect("live particle").point.0
    }

    /// The `k`-th live particle (for uniform selection).
    pub fn nth_id(&self, k: usize) -> ParticleId {
        self.live[k]
    }

    /// Iterator over `(id, point)` of live particles.
    pub fn iter(&self) -> impl Iterator<Item = (ParticleId, &[f64])> + '_ {
        self.live.iter().map(move |&id| (id, self.pos(id)))
    }

    /// Coordinates flattened in live order.
    pub fn flat_coords(&self) -> Vec<f64> {
        self.iter().flat_map(|(_, p)| p.iter().copied()).collect()
    }

    /// Lexicographically sorted coordinates, for order-free comparison.
    pub fn sorted_points(&self) -> Vec<Coords> {
        let mut pts: Vec<Coords> = self.iter().map(|(_, p)| p.iter().copied().collect()).collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts
    }

    /// Same point set, regardless of ids and insertion order.
    pub fn same_points(&self, other: &Configuration) -> bool {
        self.sorted_points() == other.sorted_points()
    }

    fn cell_of(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        for &c in x.iter().rev() {
            let k = ((c / self.cell_width) as usize).min(self.cells_per_axis - 1);
            idx = idx * self.cells_per_axis + k;
        }
        idx
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.torus.dim {
            return Err(Error::InvalidParameter(format!(
                "point has {} coordinates, torus dimension is {}",
                x.len(),
                self.torus.dim
            )));
        }
        if x.iter().any(|&c| !(0.0..self.torus.side).contains(&c)) {
            return Err(Error::InvalidParameter(format!("point {x:?} is not wrapped into the box")));
        }
        Ok(())
    }

    /// Adds a wrapped point; rejects exact duplicates.
    pub fn insert(&mut self, x: Point) -> Result<ParticleId> {
        self.check_point(&x)?;
        let cell = self.cell_of(&x);
        if self.cells[cell].iter().any(|&id| self.pos(id) == &x[..]) {
            return Err(Error::DuplicatePoint(x.0.to_vec()));
        }
        let id = match self.free.pop() {
            Some(id) => id,
            None => {
                self.slots.push(None);
                self.slots.len() - 1
            }
        };
        self.cells[cell].push(id);
        self.slots[id] = Some(Slot { point: x, cell, live_pos: self.live.len() });
        self.live.push(id);
        Ok(id)
    }

    /// Removes a particle and returns its position.
    pub fn remove(&mut self, id: ParticleId) -> Result<Point> {
        let slot = self.slots.get_mut(id).and_then(Option::take).ok_or(Error::MissingParticle(id))?;
        let cell = &mut self.cells[slot.cell];
        let k = cell.iter().position(|&j| j == id).expect("cell index out of sync");
        cell.swap_remove(k);
        self.live.swap_remove(slot.live_pos);
        if let Some(&moved) = self.live.get(slot.live_pos) {
            self.slots[moved].as_mut().unwrap().live_pos = slot.live_pos;
        }
        self.free.push(id);
        Ok(slot.point)
    }

    /// Moves a particle to a new wrapped position, keeping its id.
    pub fn relocate(&mut self, id: ParticleId, to: Point) -> Result<Point> {
        self.check_point(&to)?;
        let new_cell = self.cell_of(&to);
        if self.cells[new_cell].iter().any(|&j| j != id && self.pos(j) == &to[..]) {
            return Err(Error::DuplicatePoint(to.0.to_vec()));
        }
        let old_cell = self.slots.get(id).and_then(|s| s.as_ref()).ok_or(Error::MissingParticle(id))?.cell;
        if old_cell != new_cell {
            let cell = &mut self.cells[old_cell];
            let k = cell.iter().position(|&j| j == id).expect("cell index out of sync");
            cell.swap_remove(k);
            self.cells[new_cell].push(id);
        }
        let slot = self.slots[id].as_mut().unwrap();
        slot.cell = new_cell;
        Ok(std::mem::replace(&mut slot.point, to))
    }

    /// Per-axis cell offsets to scan for a query of radius `r`.
    fn axis_offsets(&self, r: f64) -> (isize, isize) {
        let n = self.cells_per_axis as isize;
        let reach = (r / self.cell_width).ceil() as isize;
        if 2 * reach + 1 >= n {
            (0, n - 1)
        } else {
            (-reach, reach)
        }
    }

    /// Calls `visit(id, displacement x - y, distance)` for every particle `y`
    /// within minimum-image distance `r` of `x`.
    ///
    /// Callers must ensure `r <= L/2`; see [`Configuration::neighbors_within`]
    /// for the checked variant.
    pub fn for_each_within(&self, x: &[f64], r: f64, mut visit: impl FnMut(ParticleId, &[f64], f64)) {
        if self.live.is_empty() {
            return;
        }
        let n = self.cells_per_axis as isize;
        let (lo, hi) = self.axis_offsets(r);
        let wraps_all = lo == 0 && hi == n - 1;
        let dim = self.torus.dim;
        let home: SmallVec<[isize; 3]> =
            x.iter().map(|&c| ((c / self.cell_width) as isize).min(n - 1)).collect();
        let mut off: SmallVec<[isize; 3]> = SmallVec::from_elem(lo, dim);
        let mut disp: Coords = SmallVec::from_elem(0.0, dim);
        loop {
            let mut idx = 0usize;
            for a in (0..dim).rev() {
                let c = if wraps_all { off[a] } else { (home[a] + off[a]).rem_euclid(n) };
                idx = idx * self.cells_per_axis + c as usize;
            }
            for &id in &self.cells[idx] {
                let y = self.pos(id);
                let mut s = 0.0;
                for a in 0..dim {
                    let d = self.torus.min_image_coord(x[a] - y[a]);
                    disp[a] = d;
                    s += d * d;
                }
                let dist = s.sqrt();
                if dist <= r {
                    visit(id, &disp, dist);
                }
            }
            // odometer increment
            let mut a = 0;
            loop {
                if a == dim {
                    return;
                }
                off[a] += 1;
                if off[a] <= hi {
                    break;
                }
                off[a] = lo;
                a += 1;
            }
        }
    }

    /// Particles within distance `r` of `x`, with displacements `x - y`.
    pub fn neighbors_within(&self, x: &[f64], r: f64) -> Result<Vec<(ParticleId, Displacement)>> {
        if r > self.torus.half_side() {
            return Err(Error::RadiusTooLarge { radius: r, half_side: self.torus.half_side() });
        }
        let mut out = Vec::new();
        self.for_each_within(x, r, |id, d, norm| {
            out.push((id, Displacement { vector: d.iter().copied().collect(), norm }))
        });
        Ok(out)
    }

    /// Number of cells; exposed for index consistency checks.
    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    /// Total number of entries across all cells.
    pub fn indexed_count(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    /// Checks that the cell index exactly partitions the live particles.
    pub fn index_is_consistent(&self) -> bool {
        if self.indexed_count() != self.live.len() {
            return false;
        }
        self.cells.iter().enumerate().all(|(c, ids)| {
            ids.iter().all(|&id| {
                self.slots.get(id).and_then(|s| s.as_ref()).is_some_and(|s| s.cell == c && self.cell_of(&s.point) == c)
            })
        })
    }
}

/// An axis-aligned cube `center ± half_width` on the torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportBox {
    pub center: Point,
    pub half_width: f64,
}

impl SupportBox {
    pub fn volume(&self) -> f64 {
        (2.0 * self.half_width).powi(self.center.len() as i32)
    }

    /// Midpoint tensor grid with `per_axis` nodes per axis; returns wrapped
    /// nodes and the common weight.
    pub fn midpoint_grid(&self, torus: &Torus, per_axis: usize) -> (Vec<Point>, f64) {
        let dim = self.center.len();
        let h = 2.0 * self.half_width / per_axis as f64;
        let total = per_axis.pow(dim as u32);
        let mut nodes = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut p = Coords::with_capacity(dim);
            for a in 0..dim {
                let k = rem % per_axis;
                rem /= per_axis;
                p.push(torus.wrap_coord(self.center[a] - self.half_width + (k as f64 + 0.5) * h));
            }
            nodes.push(Point(p));
        }
        (nodes, h.powi(dim as i32))
    }
}
