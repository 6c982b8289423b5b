//! Finite lattice domains in Z^d, the wired dissipative multigraph on them,
//! the canonical direction order and the boundary enumeration used by the
//! coupling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A lattice point. For `d = 2` the third coordinate is always zero.
pub type Point = [i32; 3];

pub const ORIGIN: Point = [0, 0, 0];

/// Largest number of cells the dense index map may address.
const MAX_CELLS: u64 = (u32::MAX - 1) as u64;

/// A unit lattice vector, numbered by the fixed order
/// `+e1, -e1, +e2, -e2, +e3, -e3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Direction(pub u8);

impl Direction {
    pub fn all(d: usize) -> impl Iterator<Item = Direction> {
        (0..2 * d as u8).map(Direction)
    }

    #[inline]
    pub fn axis(self) -> usize {
        (self.0 / 2) as usize
    }

    #[inline]
    pub fn sign(self) -> i32 {
        if self.0 % 2 == 0 {
            1
        } else {
            -1
        }
    }

    #[inline]
    pub fn offset(self) -> Point {
        let mut p = ORIGIN;
        p[self.axis()] = self.sign();
        p
    }

    pub fn opposite(self) -> Direction {
        Direction(self.0 ^ 1)
    }

    /// The direction pointing from `from` to the lattice neighbour `to`.
    pub fn between(from: &Point, to: &Point) -> Option<Direction> {
        let mut found = None;
        for axis in 0..3 {
            match to[axis] - from[axis] {
                0 => {}
                1 if found.is_none() => found = Some(Direction(2 * axis as u8)),
                -1 if found.is_none() => found = Some(Direction(2 * axis as u8 + 1)),
                _ => return None,
            }
        }
        found
    }
}

#[inline]
pub fn step(p: &Point, dir: Direction) -> Point {
    let mut q = *p;
    q[dir.axis()] += dir.sign();
    q
}

#[inline]
pub fn norm2(p: &Point) -> i64 {
    p.iter().map(|&c| (c as i64) * (c as i64)).sum()
}

#[inline]
pub fn l1_distance(a: &Point, b: &Point) -> u32 {
    (0..3).map(|i| a[i].abs_diff(b[i])).sum()
}

/// Membership in the Euclidean ball `{x : |x| <= r}`.
#[inline]
pub fn in_ball(p: &Point, r: f64) -> bool {
    (norm2(p) as f64) <= r * r
}

/// Membership in the cube `[-k, k]^d`.
#[inline]
pub fn in_cube(p: &Point, k: i32) -> bool {
    p.iter().all(|&c| c.abs() <= k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    /// `B(k) = [-k, k]^d`.
    Cube,
    /// `{x : |x| <= r}`.
    Ball,
    /// An explicit vertex list.
    Custom,
}

/// A finite subset of Z^d with a dense, lexicographically ordered index map.
#[derive(Clone, Debug)]
pub struct BoxDomain {
    d: usize,
    shape: Shape,
    radius: u32,
    lo: Point,
    extent: [usize; 3],
    cells: Vec<u32>,
    sites: Vec<Point>,
}

const NONE: u32 = u32::MAX;

pub fn check_dimension(d: usize) -> Result<()> {
    if d == 2 || d == 3 {
        Ok(())
    } else {
        Err(Error::UnsupportedDimension(d))
    }
}

impl BoxDomain {
    /// Builds the cube `B(k)` or the Euclidean ball of radius `k`.
    pub fn build(d: usize, k: u32, shape: Shape) -> Result<Self> {
        check_dimension(d)?;
        let side = 2 * k as u64 + 1;
        let cells = side.checked_pow(d as u32).filter(|&c| c <= MAX_CELLS);
        if cells.is_none() {
            return Err(Error::DomainTooLarge { d, k });
        }
        let k = k as i32;
        let mut lo = ORIGIN;
        for c in lo.iter_mut().take(d) {
            *c = -k;
        }
        let r = k as f64;
        let keep = |p: &Point| match shape {
            Shape::Cube => true,
            Shape::Ball => in_ball(p, r),
            Shape::Custom => unreachable!(),
        };
        let mut sites = Vec::new();
        let zr = if d == 3 { -k..=k } else { 0..=0 };
        for x in -k..=k {
            for y in -k..=k {
                for z in zr.clone() {
                    let p = [x, y, z];
                    if keep(&p) {
                        sites.push(p);
                    }
                }
            }
        }
        let mut dom = Self::with_sites(d, shape, lo, [side as usize; 3], sites);
        dom.radius = k as u32;
        Ok(dom)
    }

    /// Builds a domain from an arbitrary finite set of points.
    pub fn from_points(d: usize, points: &[Point]) -> Result<Self> {
        check_dimension(d)?;
        if points.is_empty() {
            return Err(Error::InvalidDomain("empty vertex set".into()));
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            if d == 2 && p[2] != 0 {
                return Err(Error::InvalidDomain(format!("point {p:?} is not in Z^2")));
            }
            for i in 0..3 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        let mut extent = [1usize; 3];
        let mut total: u64 = 1;
        for i in 0..3 {
            extent[i] = (hi[i] - lo[i]) as usize + 1;
            total = total.saturating_mul(extent[i] as u64);
        }
        if total > MAX_CELLS {
            return Err(Error::InvalidDomain("bounding box too large".into()));
        }
        let mut sites = points.to_vec();
        sites.sort();
        sites.dedup();
        Ok(Self::with_sites(d, Shape::Custom, lo, extent, sites))
    }

    fn with_sites(d: usize, shape: Shape, lo: Point, extent: [usize; 3], sites: Vec<Point>) -> Self {
        let mut extent = extent;
        if d == 2 {
            extent[2] = 1;
        }
        let mut dom = BoxDomain {
            d,
            shape,
            radius: 0,
            lo,
            extent,
            cells: vec![NONE; extent[0] * extent[1] * extent[2]],
            sites,
        };
        for i in 0..dom.sites.len() {
            let c = dom.cell(&dom.sites[i]).expect("site inside bounding box");
            dom.cells[c] = i as u32;
        }
        dom
    }

    #[inline]
    fn cell(&self, p: &Point) -> Option<usize> {
        let mut c = 0usize;
        for i in 0..3 {
            let off = p[i] - self.lo[i];
            if off < 0 || off as usize >= self.extent[i] {
                return None;
            }
            c = c * self.extent[i] + off as usize;
        }
        Some(c)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// The `k` (cube) or `r` (ball) the domain was built with; zero for custom domains.
    pub fn radius(&self) -> u32 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Point] {
        &self.sites
    }

    #[inline]
    pub fn site(&self, i: u32) -> Point {
        self.sites[i as usize]
    }

    #[inline]
    pub fn index_of(&self, p: &Point) -> Option<u32> {
        self.cell(p).map(|c| self.cells[c]).filter(|&i| i != NONE)
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.index_of(p).is_some()
    }

    /// Index of the lattice neighbour of site `i` in direction `dir`, or
    /// `None` if that neighbour lies outside the domain.
    #[inline]
    pub fn neighbor(&self, i: u32, dir: Direction) -> Option<u32> {
        self.index_of(&step(&self.sites[i as usize], dir))
    }

    /// Number of lattice neighbours of site `i` inside the domain.
    pub fn inner_degree(&self, i: u32) -> usize {
        Direction::all(self.d).filter(|&dir| self.neighbor(i, dir).is_some()).count()
    }
}

/// A vertex of the wired graph: a site of the domain or the root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Node {
    Site(u32),
    Root,
}

/// A parent edge slot of a vertex: an ordinary edge in a lattice direction
/// (possibly leading to the root when the neighbour is outside the domain),
/// or the dissipative edge to the root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeSlot {
    Ord(Direction),
    Diss,
}

impl EdgeSlot {
    pub fn is_dissipative(self) -> bool {
        matches!(self, EdgeSlot::Diss)
    }
}

/// The wired multigraph `G_Λ`: every vertex outside the domain is identified
/// with the root, and optionally every site carries a dissipative edge.
#[derive(Clone, Debug)]
pub struct DissipativeGraph {
    domain: BoxDomain,
    dissipative: bool,
}

impl DissipativeGraph {
    pub fn new(domain: BoxDomain, dissipative: bool) -> Self {
        DissipativeGraph { domain, dissipative }
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.d
    }

    pub fn is_dissipative(&self) -> bool {
        self.dissipative
    }

    /// The same domain with dissipative edges removed.
    pub fn without_dissipation(&self) -> Self {
        DissipativeGraph {
            domain: self.domain.clone(),
            dissipative: false,
        }
    }

    /// All edge slots of site `x`, ordinary ones in direction order first.
    pub fn slots(&self, _x: u32) -> impl Iterator<Item = EdgeSlot> + '_ {
        Direction::all(self.dim())
            .map(EdgeSlot::Ord)
            .chain(self.dissipative.then_some(EdgeSlot::Diss))
    }

    #[inline]
    pub fn target(&self, x: u32, slot: EdgeSlot) -> Node {
        match slot {
            EdgeSlot::Diss => Node::Root,
            EdgeSlot::Ord(dir) => match self.domain.neighbor(x, dir) {
                Some(y) => Node::Site(y),
                None => Node::Root,
            },
        }
    }

    pub fn has_slot(&self, slot: EdgeSlot) -> bool {
        match slot {
            EdgeSlot::Diss => self.dissipative,
            EdgeSlot::Ord(dir) => (dir.0 as usize) < 2 * self.dim(),
        }
    }

    /// Number of ordinary edges from `x` to the root.
    pub fn root_multiplicity(&self, x: u32) -> usize {
        2 * self.dim() - self.domain.inner_degree(x)
    }

    /// `(ordinary half-slots, dissipative edges)`.
    pub fn edge_count(&self) -> (usize, usize) {
        let n = self.domain.len();
        (2 * self.dim() * n, if self.dissipative { n } else { 0 })
    }
}

pub fn build_wired_graph(domain: BoxDomain, dissipative: bool) -> DissipativeGraph {
    DissipativeGraph::new(domain, dissipative)
}

/// A set of directions stored as a bit mask over the direction order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct DirSet(pub u8);

impl DirSet {
    pub fn insert(&mut self, dir: Direction) {
        self.0 |= 1 << dir.0;
    }

    pub fn contains(self, dir: Direction) -> bool {
        self.0 & (1 << dir.0) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Direction> {
        (0..8u8).filter(move |i| self.0 & (1 << i) != 0).map(Direction)
    }

    fn rank(self, dir: Direction) -> u8 {
        (self.0 & ((1u8 << dir.0) - 1)).count_ones() as u8
    }
}

impl FromIterator<Direction> for DirSet {
    fn from_iter<I: IntoIterator<Item = Direction>>(iter: I) -> Self {
        let mut s = DirSet::default();
        for d in iter {
            s.insert(d);
        }
        s
    }
}

/// `α_{P,K}(dir)` for `K = {k_start, ..., k_start + |P| - 1}`: the i-th
/// direction of `P` in direction order maps to `k_start + i`.
#[inline]
pub fn alpha(p: DirSet, k_start: u8, dir: Direction) -> Option<u8> {
    p.contains(dir).then(|| k_start + p.rank(dir))
}

/// Inverse of [`alpha`].
#[inline]
pub fn alpha_inv(p: DirSet, k_start: u8, height: u8) -> Option<Direction> {
    let i = height.checked_sub(k_start)? as usize;
    p.iter().nth(i)
}

/// The full table of `α_{P,K}` for an explicit interval `K`.
pub fn alpha_bijection(p: DirSet, k: &[u8]) -> Result<Vec<(Direction, u8)>> {
    if p.is_empty() {
        return Err(Error::Alpha("empty direction set".into()));
    }
    if k.len() != p.len() {
        return Err(Error::Alpha(format!("|P| = {} but |K| = {}", p.len(), k.len())));
    }
    if k.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::Alpha("K is not an integer interval".into()));
    }
    Ok(p.iter().map(|dir| (dir, alpha(p, k[0], dir).unwrap())).collect())
}

/// The enumeration `z_1, ..., z_N` of the exterior boundary of `B(k)`
/// followed by `z_{N+1}, ..., z_{N+M}` enumerating `B(k)`.
#[derive(Clone, Debug)]
pub struct BoundaryOrder {
    pub d: usize,
    pub k: u32,
    /// `z_1..z_N`.
    pub boundary: Vec<Point>,
    /// `witness[j]` is the zero-based `i(j)` for `j >= 1`; `None` for `j = 0`.
    pub witness: Vec<Option<usize>>,
    /// L1 distance between `z_j` and its witness.
    pub witness_distance: Vec<u32>,
    /// `z_{N+1}..z_{N+M}`, lexicographic.
    pub interior: Vec<Point>,
}

impl BoundaryOrder {
    pub fn all(&self) -> impl Iterator<Item = &Point> {
        self.boundary.iter().chain(self.interior.iter())
    }
}

/// Points outside `B(k)` adjacent to it, in lexicographic order.
pub fn exterior_boundary(d: usize, k: u32) -> Vec<Point> {
    let k = k as i32;
    let mut out = Vec::new();
    let zr = if d == 3 { -k - 1..=k + 1 } else { 0..=0 };
    for x in -k - 1..=k + 1 {
        for y in -k - 1..=k + 1 {
            for z in zr.clone() {
                let p = [x, y, z];
                let outside = p.iter().filter(|c| c.abs() == k + 1).count();
                if outside == 1 && p.iter().all(|c| c.abs() <= k + 1) {
                    out.push(p);
                }
            }
        }
    }
    out
}

pub fn boundary_enumeration(d: usize, k: u32) -> Result<BoundaryOrder> {
    check_dimension(d)?;
    let mut ring = exterior_boundary(d, k);
    let boundary = if d == 2 {
        // counter-clockwise walk around the ring starting at the lowest
        // cell of the right side
        let start = (-(k as f64)).atan2(k as f64 + 1.0) - 1e-9;
        let angle = |p: &Point| {
            let a = (p[1] as f64).atan2(p[0] as f64);
            if a < start {
                a + 2.0 * std::f64::consts::PI
            } else {
                a
            }
        };
        ring.sort_by(|a, b| angle(a).partial_cmp(&angle(b)).unwrap());
        ring
    } else {
        greedy_order(ring)
    };
    let mut witness = vec![None];
    let mut witness_distance = vec![0];
    for j in 1..boundary.len() {
        let (i, dist) = (0..j)
            .rev()
            .map(|i| (i, l1_distance(&boundary[i], &boundary[j])))
            .min_by_key(|&(_, dist)| dist)
            .unwrap();
        witness.push(Some(i));
        witness_distance.push(dist);
    }
    let interior = BoxDomain::build(d, k, Shape::Cube)?.sites().to_vec();
    Ok(BoundaryOrder {
        d,
        k,
        boundary,
        witness,
        witness_distance,
        interior,
    })
}

/// Orders points so that each one is as close as possible to the points
/// already listed; ties go to the point nearest the last listed one, then
/// lexicographic order.
fn greedy_order(points: Vec<Point>) -> Vec<Point> {
    let n = points.len();
    let mut used = vec![false; n];
    let mut best = vec![u32::MAX; n];
    let mut out = Vec::with_capacity(n);
    let mut cur = 0;
    for _ in 0..n {
        used[cur] = true;
        out.push(points[cur]);
        for (i, p) in points.iter().enumerate() {
            best[i] = best[i].min(l1_distance(p, &points[cur]));
        }
        let last = points[cur];
        if let Some(next) = (0..n)
            .filter(|&i| !used[i])
            .min_by_key(|&i| (best[i], l1_distance(&points[i], &last), i))
        {
            cur = next;
        }
    }
    out
}
