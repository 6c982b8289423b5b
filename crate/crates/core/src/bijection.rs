//! Discretization of continuous heights, the bijection between allowed
//! configurations and spanning trees of the wired graph, and the local
//! height map evaluated on tree paths.

use rand::Rng;
use rustc_hash::FxHashMap;
use serde_json::Value;

use crate::burning::burning_test;
use crate::error::{Error, Result};
use crate::lattice::{
    alpha, alpha_inv, step, BoxDomain, DirSet, Direction, DissipativeGraph, EdgeSlot, Node, Point,
};
use crate::sandpile::ContinuousConfig;

/// Heights in {0, …, 2d}; the value 2d marks sites whose continuous height
/// lies in [2d, 2d + γ).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StarConfig {
    d: usize,
    xi: Vec<u8>,
    full: usize,
}

impl StarConfig {
    pub fn new(d: usize, xi: Vec<u8>) -> Result<Self> {
        crate::lattice::check_dimension(d)?;
        let cap = 2 * d as u8;
        if let Some((site, &h)) = xi.iter().enumerate().find(|(_, &h)| h > cap) {
            return Err(Error::HeightOutOfRange { site, height: h as f64 });
        }
        let full = xi.iter().filter(|&&h| h == cap).count();
        Ok(StarConfig { d, xi, full })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn heights(&self) -> &[u8] {
        &self.xi
    }

    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    /// H(ξ): number of sites at height 2d.
    pub fn h(&self) -> usize {
        self.full
    }

    pub fn is_discrete(&self) -> bool {
        self.full == 0
    }

    pub fn is_allowed(&self, domain: &BoxDomain) -> Result<bool> {
        Ok(burning_test(domain, &self.xi)?.is_allowed())
    }
}

/// Maps `h ≤ η < h+1` to `h`, and every height at least 2d to 2d.
pub fn discretize(d: usize, config: &ContinuousConfig) -> Result<StarConfig> {
    let cap = 2 * d as u8;
    let mut xi = Vec::with_capacity(config.len());
    for (site, &h) in config.heights.iter().enumerate() {
        if !(h.is_finite() && h >= 0.0) {
            return Err(Error::HeightOutOfRange { site, height: h });
        }
        xi.push(if h >= cap as f64 { cap } else { h.floor() as u8 });
    }
    StarConfig::new(d, xi)
}

/// Draws continuous heights given their discretization: Unif[h, h+1) below
/// 2d and Unif[2d, 2d+γ) at 2d.
pub fn attach_uniform_heights<R: Rng + ?Sized>(
    xi: &StarConfig,
    gamma: f64,
    rng: &mut R,
) -> Result<ContinuousConfig> {
    let cap = 2 * xi.d as u8;
    if xi.full > 0 && !(gamma > 0.0) {
        return Err(Error::InvalidParams("height 2d needs gamma > 0".into()));
    }
    let heights = xi
        .xi
        .iter()
        .map(|&h| {
            let (lo, width) = if h == cap { (cap as f64, gamma) } else { (h as f64, 1.0) };
            // guard against rounding up to the right endpoint
            let v = lo + width * rng.random::<f64>();
            if v >= lo + width {
                lo
            } else {
                v
            }
        })
        .collect();
    Ok(ContinuousConfig::new(heights))
}

/// A spanning tree of the wired graph, stored as one parent slot per site.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SpanningTree {
    pub parent: Vec<EdgeSlot>,
}

impl SpanningTree {
    /// H(t): number of dissipative parent edges.
    pub fn h(&self) -> usize {
        self.parent.iter().filter(|s| s.is_dissipative()).count()
    }

    /// Checks slots against the graph and returns the level of every site:
    /// 1 for a dissipative parent, 2 for an ordinary edge into the root,
    /// otherwise one more than the parent.
    pub fn levels(&self, graph: &DissipativeGraph) -> Result<Vec<u32>> {
        let n = graph.domain().len();
        if self.parent.len() != n {
            return Err(Error::NotATree(format!("{} parent slots for {} sites", self.parent.len(), n)));
        }
        let mut level = vec![0u32; n];
        let mut on_stack = vec![false; n];
        let mut stack = Vec::new();
        for start in 0..n as u32 {
            let mut x = start;
            while level[x as usize] == 0 {
                let slot = self.parent[x as usize];
                if !graph.has_slot(slot) {
                    return Err(Error::NotATree(format!("site {x} uses a dissipative edge")));
                }
                match (slot, graph.target(x, slot)) {
                    (EdgeSlot::Diss, _) => level[x as usize] = 1,
                    (_, Node::Root) => level[x as usize] = 2,
                    (_, Node::Site(y)) => {
                        if on_stack[x as usize] {
                            return Err(Error::NotATree(format!("cycle through site {x}")));
                        }
                        on_stack[x as usize] = true;
                        stack.push(x);
                        x = y;
                    }
                }
            }
            let mut above = level[x as usize];
            while let Some(y) = stack.pop() {
                on_stack[y as usize] = false;
                above += 1;
                level[y as usize] = above;
            }
        }
        Ok(level)
    }

    pub fn validate(&self, graph: &DissipativeGraph) -> Result<()> {
        self.levels(graph).map(|_| ())
    }

    /// JSON form: `[[[x, y], 0], [[x, y], "diss"], …]`.
    pub fn to_json(&self, domain: &BoxDomain) -> Value {
        let d = domain.dim();
        Value::Array(
            self.parent
                .iter()
                .enumerate()
                .map(|(i, slot)| {
                    let p = domain.site(i as u32);
                    let slot = match slot {
                        EdgeSlot::Ord(dir) => Value::from(dir.0),
                        EdgeSlot::Diss => Value::from("diss"),
                    };
                    Value::Array(vec![Value::from(p[..d].to_vec()), slot])
                })
                .collect(),
        )
    }

    pub fn from_json(domain: &BoxDomain, value: &Value) -> Result<Self> {
        let d = domain.dim();
        let bad = |m: &str| Error::Config(format!("tree JSON: {m}"));
        let entries = value.as_array().ok_or_else(|| bad("expected a list"))?;
        let mut parent: Vec<Option<EdgeSlot>> = vec![None; domain.len()];
        for e in entries {
            let pair = e.as_array().filter(|a| a.len() == 2).ok_or_else(|| bad("expected [vertex, slot]"))?;
            let coords = pair[0].as_array().filter(|c| c.len() == d).ok_or_else(|| bad("bad vertex"))?;
            let mut p: Point = [0; 3];
            for (i, c) in coords.iter().enumerate() {
                p[i] = c.as_i64().ok_or_else(|| bad("bad coordinate"))? as i32;
            }
            let x = domain.index_of(&p).ok_or(Error::OutsideDomain(p))?;
            let slot = match &pair[1] {
                Value::String(s) if s == "diss" => EdgeSlot::Diss,
                v => {
                    let j = v.as_u64().filter(|&j| j < 2 * d as u64).ok_or_else(|| bad("bad slot"))?;
                    EdgeSlot::Ord(Direction(j as u8))
                }
            };
            if parent[x as usize].replace(slot).is_some() {
                return Err(bad("vertex listed twice"));
            }
        }
        let parent = parent.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| bad("missing vertices"))?;
        Ok(SpanningTree { parent })
    }
}

/// Burning data of one site: `n` ordinary edges into earlier levels, the
/// directions `p` into the previous level, and the first height `k_start`
/// of the interval K.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathData {
    pub n: u8,
    pub p: DirSet,
    pub k_start: u8,
}

/// Level of the root as seen through an ordinary edge.
const ROOT_LEVEL: u32 = 1;

fn neighbour_level(domain: &BoxDomain, level: &[u32], x: u32, dir: Direction) -> u32 {
    domain.neighbor(x, dir).map_or(ROOT_LEVEL, |y| level[y as usize])
}

fn path_data_from<F: Fn(Direction) -> u32>(d: usize, own: u32, key: F) -> PathData {
    let mut n = 0;
    let mut p = DirSet::default();
    for dir in Direction::all(d) {
        let l = key(dir);
        if l < own {
            n += 1;
        }
        if l + 1 == own {
            p.insert(dir);
        }
    }
    PathData { n, p, k_start: 2 * d as u8 - n }
}

/// σ: allowed configuration to spanning tree.
pub fn sigma(graph: &DissipativeGraph, xi: &StarConfig) -> Result<SpanningTree> {
    let domain = graph.domain();
    let d = domain.dim();
    if xi.len() != domain.len() {
        return Err(Error::LengthMismatch { expected: domain.len(), got: xi.len() });
    }
    if xi.full > 0 && !graph.is_dissipative() {
        return Err(Error::NotAllowed);
    }
    let schedule = burning_test(domain, &xi.xi)?;
    if !schedule.is_allowed() {
        return Err(Error::NotAllowed);
    }
    let level = &schedule.level;
    let parent = (0..domain.len() as u32)
        .map(|x| {
            if level[x as usize] == 1 {
                return Ok(EdgeSlot::Diss);
            }
            let data = path_data_from(d, level[x as usize], |dir| neighbour_level(domain, level, x, dir));
            alpha_inv(data.p, data.k_start, xi.xi[x as usize])
                .map(EdgeSlot::Ord)
                .ok_or_else(|| Error::Alpha(format!("height {} outside K at site {x}", xi.xi[x as usize])))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpanningTree { parent })
}

/// φ: spanning tree to allowed configuration.
pub fn phi(graph: &DissipativeGraph, tree: &SpanningTree) -> Result<StarConfig> {
    let domain = graph.domain();
    let d = domain.dim();
    let level = tree.levels(graph)?;
    let xi = (0..domain.len() as u32)
        .map(|x| match tree.parent[x as usize] {
            EdgeSlot::Diss => 2 * d as u8,
            EdgeSlot::Ord(dir) => {
                let data = path_data_from(d, level[x as usize], |e| neighbour_level(domain, &level, x, e));
                alpha(data.p, data.k_start, dir).expect("parent lies one level below")
            }
        })
        .collect();
    StarConfig::new(d, xi)
}

/// How a tree path ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathEnd {
    /// The last point is joined to the root by this slot.
    Root(EdgeSlot),
    /// The path was cut before reaching the root.
    Truncated,
}

/// A path in a spanning tree from its first point toward the root.
/// An empty point list stands for the root itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreePath {
    pub points: Vec<Point>,
    pub end: PathEnd,
}

impl TreePath {
    pub fn root() -> Self {
        TreePath { points: Vec::new(), end: PathEnd::Root(EdgeSlot::Diss) }
    }

    /// Distance to the root, counting the root as level 1 behind an
    /// ordinary edge.
    fn root_level(&self) -> Option<u32> {
        if self.points.is_empty() {
            return Some(ROOT_LEVEL);
        }
        match self.end {
            PathEnd::Root(EdgeSlot::Diss) => Some(self.points.len() as u32),
            PathEnd::Root(EdgeSlot::Ord(_)) => Some(self.points.len() as u32 + ROOT_LEVEL),
            PathEnd::Truncated => None,
        }
    }
}

/// Path of site `x` to the root in a finite-volume tree.
pub fn tree_path(graph: &DissipativeGraph, tree: &SpanningTree, x: u32) -> TreePath {
    let domain = graph.domain();
    let mut points = Vec::new();
    let mut cur = x;
    loop {
        points.push(domain.site(cur));
        let slot = tree.parent[cur as usize];
        match graph.target(cur, slot) {
            Node::Site(y) => cur = y,
            Node::Root => return TreePath { points, end: PathEnd::Root(slot) },
        }
        assert!(points.len() <= domain.len(), "parent pointers contain a cycle");
    }
}

/// Height at `x` computed from the paths of `x` (first) and of its 2d
/// neighbours in direction order. Levels are measured from the earliest
/// vertex common to all paths, or from the root if they only meet there.
pub fn local_height_from_paths(d: usize, x: &Point, paths: &[TreePath]) -> Result<u8> {
    Ok(local_path_data(d, x, paths)?.0)
}

/// As [`local_height_from_paths`], also returning the burning data.
pub fn local_path_data(d: usize, x: &Point, paths: &[TreePath]) -> Result<(u8, PathData)> {
    let inconsistent = |m: String| Error::InconsistentPaths(m);
    if paths.len() != 2 * d + 1 {
        return Err(inconsistent(format!("expected {} paths, got {}", 2 * d + 1, paths.len())));
    }
    let own = &paths[0];
    if own.points.first() != Some(x) {
        return Err(inconsistent("first path does not start at x".into()));
    }
    for (dir, path) in Direction::all(d).zip(&paths[1..]) {
        if let Some(first) = path.points.first() {
            if *first != step(x, dir) {
                return Err(inconsistent(format!("path {} does not start at the neighbour", dir.0)));
            }
        }
    }
    let cap = 2 * d as u8;
    let parent_dir = match (own.points.get(1), own.end) {
        (Some(next), _) => Direction::between(x, next).ok_or_else(|| inconsistent("path jumps".into()))?,
        (None, PathEnd::Root(EdgeSlot::Diss)) => {
            return Ok((cap, PathData { n: 0, p: DirSet::default(), k_start: cap }));
        }
        (None, PathEnd::Root(EdgeSlot::Ord(dir))) => dir,
        (None, PathEnd::Truncated) => return Err(Error::EmptyPath),
    };

    let pos: FxHashMap<Point, usize> = own.points.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    // entry[j] = (index in path j, index in own path) of the first shared point
    let mut entry: Vec<Option<(usize, usize)>> = Vec::with_capacity(2 * d);
    for path in &paths[1..] {
        let hit = path.points.iter().enumerate().find_map(|(a, p)| pos.get(p).map(|&b| (a, b)));
        if let Some((a, b)) = hit {
            let overlap = (path.points.len() - a).min(own.points.len() - b);
            if path.points[a..a + overlap] != own.points[b..b + overlap] {
                return Err(inconsistent("paths separate after meeting".into()));
            }
            let both_complete = path.points.len() - a == own.points.len() - b;
            if both_complete && path.end != own.end && path.end != PathEnd::Truncated && own.end != PathEnd::Truncated {
                return Err(inconsistent("paths reach the root through different edges".into()));
            }
        }
        entry.push(hit);
    }

    let meet = entry.iter().map(|e| e.map(|(_, b)| b)).collect::<Option<Vec<_>>>();
    let (own_key, keys): (u32, Vec<u32>) = match meet {
        Some(idx) => {
            let v = idx.into_iter().chain([0]).max().unwrap();
            let keys = entry.iter().map(|e| {
                let (a, b) = e.unwrap();
                (a + v - b) as u32
            });
            (v as u32, keys.collect())
        }
        None => {
            let missing = |p: &TreePath| p.root_level().ok_or_else(|| inconsistent("paths end before meeting".into()));
            let own_level = missing(own)?;
            let keys = paths[1..]
                .iter()
                .zip(&entry)
                .map(|(p, e)| match e {
                    Some((a, b)) => Ok(own_level - *b as u32 + *a as u32),
                    None => missing(p),
                })
                .collect::<Result<Vec<_>>>()?;
            (own_level, keys)
        }
    };
    let data = path_data_from(d, own_key, |dir| keys[dir.0 as usize]);
    let h = alpha(data.p, data.k_start, parent_dir)
        .ok_or_else(|| inconsistent("parent edge does not lead one level down".into()))?;
    Ok((h, data))
}

/// Height at site `x` read off the tree through [`local_height_from_paths`].
pub fn local_height_in_tree(graph: &DissipativeGraph, tree: &SpanningTree, x: u32) -> Result<u8> {
    let domain = graph.domain();
    let p = domain.site(x);
    let mut paths = vec![tree_path(graph, tree, x)];
    for dir in Direction::all(domain.dim()) {
        paths.push(match domain.neighbor(x, dir) {
            Some(y) => tree_path(graph, tree, y),
            None => TreePath::root(),
        });
    }
    local_height_from_paths(domain.dim(), &p, &paths)
}
