//! Coupling of the critical and dissipative tree measures near a box B(k),
//! the resulting height comparison, and the rate experiments built on it.

use rand::Rng;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::bijection::{local_height_from_paths, PathEnd, TreePath};
use crate::error::{Error, Result};
use crate::lattice::{boundary_enumeration, in_ball, step, BoundaryOrder, BoxDomain, Direction, EdgeSlot, Point, Shape};
use crate::par::map_replicas;
use crate::rng::{mix_seed, stream_rng};
use crate::stats::{mean_se, weighted_linear_fit, Proportion};
use crate::walks::{loop_erase, KillingLaw, PointSet};
use crate::wilson::{last_in_ball, marker_threshold, ArrowStacks, Branch, Region, StackForest};

/// Tree paths of the starting points, keyed by start.
type PathMap = FxHashMap<Point, TreePath>;

/// `a` and `b` coincide on their first `idx + 1` points. When `idx` is the
/// last point of either path, the edges into the root must match too.
fn agree_through(a: &TreePath, b: &TreePath, idx: usize) -> bool {
    if a.points.len() <= idx || b.points.len() <= idx || a.points[..=idx] != b.points[..=idx] {
        return false;
    }
    if idx + 1 == a.points.len() || idx + 1 == b.points.len() {
        return a.points.len() == b.points.len() && a.end == b.end;
    }
    true
}

fn first_hit(path: &TreePath, set: &FxHashSet<Point>) -> Option<usize> {
    path.points.iter().position(|p| set.contains(p))
}

fn first_exit(path: &TreePath, m: f64) -> Option<usize> {
    path.points.iter().position(|p| !in_ball(p, m))
}

/// Heights on B(k), in the order of `interior`, read off the tree paths.
fn box_heights(d: usize, interior: &[Point], paths: &PathMap) -> Result<Vec<u8>> {
    interior
        .iter()
        .map(|x| {
            let mut list = vec![paths.get(x).cloned().ok_or(Error::OutsideDomain(*x))?];
            for dir in Direction::all(d) {
                let y = step(x, dir);
                list.push(paths.get(&y).cloned().ok_or(Error::OutsideDomain(y))?);
            }
            local_height_from_paths(d, x, &list)
        })
        .collect()
}

/// Outcome of conditions (i)–(iii) for the boundary pair (z_j, z_i(j)).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PairFlags {
    pub j: usize,
    pub witness: usize,
    /// (i) the critical path of z_j meets that of z_i(j) inside the m-ball.
    pub meets: bool,
    /// (ii) the dissipative path of z_j agrees up to that meeting point.
    pub agrees: bool,
    /// (iii) the dissipative path of z_i(j) agrees up to its last exit.
    pub witness_agrees: bool,
}

impl PairFlags {
    pub fn ok(&self) -> bool {
        self.meets && self.agrees && self.witness_agrees
    }
}

/// Conditions (i)–(iv) evaluated at one radius m.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RadiusOutcome {
    pub m: u32,
    pub pairs: Vec<PairFlags>,
    /// (iv) per interior point.
    pub inner: Vec<bool>,
    pub success: bool,
}

impl RadiusOutcome {
    /// Number of failed pair conditions plus failed interior conditions.
    pub fn failures(&self) -> usize {
        self.pairs.iter().filter(|p| !p.ok()).count() + self.inner.iter().filter(|&&ok| !ok).count()
    }
}

/// Events of the planar coupling.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanarEvents {
    pub schedule: D2Schedule,
    pub n_fin: u32,
    /// E₀: the two origin paths agree inside the m-ball.
    pub origin_agrees: bool,
    /// E_i per boundary point.
    pub boundary: Vec<bool>,
    /// F_i per interior point.
    pub inner: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CouplingReport {
    pub d: usize,
    pub k: u32,
    pub gamma: f64,
    pub lambda: f64,
    /// Radius of the wired ball standing in for Z^d on the critical side.
    pub truncation: f64,
    pub seed: u64,
    /// d = 3: conditions per radius of the m grid.
    pub radii: Vec<RadiusOutcome>,
    /// d = 2: events E₀, E_i, F_i.
    pub planar: Option<PlanarEvents>,
    pub success: bool,
    /// A step budget ran out; the replica counts as a failure.
    pub inconclusive: bool,
    pub heights0: Option<Vec<u8>>,
    pub heights_gamma: Option<Vec<u8>>,
}

impl CouplingReport {
    /// Success forces identical heights on B(k).
    pub fn heights_consistent(&self) -> bool {
        !self.success || (self.heights0.is_some() && self.heights0 == self.heights_gamma)
    }

    /// A failed replica has at least one failed condition at every radius.
    pub fn union_bound_holds(&self) -> bool {
        if self.success || self.inconclusive {
            return true;
        }
        match &self.planar {
            Some(e) => !e.origin_agrees || e.boundary.iter().chain(&e.inner).any(|ok| !ok),
            None => self.radii.iter().all(|r| r.failures() >= 1),
        }
    }
}

/// Parameters of the three-dimensional coupling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct D3Config {
    pub k: u32,
    pub m_grid: Vec<u32>,
    /// Radius of the wired ball used for both sides.
    pub n_big: f64,
    /// Arrow budget per side and replica.
    pub budget: u64,
}

impl D3Config {
    /// m ∈ {2k, 4k, 8k} (k = 0 counts as 1) and N_big = 8·max m.
    pub fn new(k: u32) -> Self {
        let base = 2 * k.max(1);
        let m_grid = vec![base, 2 * base, 4 * base];
        D3Config { k, n_big: 8.0 * (4 * base) as f64, m_grid, budget: 50_000_000 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_grid.is_empty() {
            return Err(Error::InvalidParams("empty m grid".into()));
        }
        for &m in &self.m_grid {
            if m < 2 * self.k || m == 0 {
                return Err(Error::InvalidParams(format!("m = {m} must be at least 2k = {} and positive", 2 * self.k)));
            }
            if m as f64 >= self.n_big {
                return Err(Error::InvalidParams(format!("m = {m} must be below N_big = {}", self.n_big)));
            }
        }
        if self.budget == 0 {
            return Err(Error::InvalidParams("budget must be positive".into()));
        }
        Ok(())
    }
}

fn grow_side(
    order: &BoundaryOrder,
    stacks: &mut ArrowStacks,
    n_big: f64,
    threshold: Option<u64>,
    budget: u64,
) -> Option<PathMap> {
    let mut forest = StackForest::new(Region::Ball(n_big), threshold);
    let mut left = budget;
    for z in order.all() {
        if forest.add_branch(stacks, *z, &mut left) == Branch::OutOfBudget {
            return None;
        }
    }
    debug_assert!(forest.audit().balanced());
    Some(order.all().map(|z| (*z, forest.path_from(z).expect("every start is in the forest"))).collect())
}

fn evaluate_d3(order: &BoundaryOrder, m: u32, p0: &PathMap, pg: &PathMap) -> RadiusOutcome {
    let mf = m as f64;
    let zs = &order.boundary;
    let mut pairs = Vec::with_capacity(zs.len().saturating_sub(1));
    for j in 1..zs.len() {
        let i = order.witness[j].expect("witness for j >= 1");
        let (a0, b0) = (&p0[&zs[j]], &p0[&zs[i]]);
        let (ag, bg) = (&pg[&zs[j]], &pg[&zs[i]]);
        let witness_set: FxHashSet<Point> = b0.points.iter().copied().collect();
        let hit = first_hit(a0, &witness_set);
        let meets = match (hit, first_exit(a0, mf)) {
            (Some(q), Some(e)) => q < e,
            (Some(_), None) => true,
            _ => false,
        };
        let agrees = hit.is_some_and(|q| agree_through(ag, a0, q));
        let last = last_in_ball(&b0.points, mf).unwrap_or(0);
        let witness_agrees = agree_through(bg, b0, (last + 1).min(b0.points.len() - 1));
        pairs.push(PairFlags { j, witness: i, meets, agrees, witness_agrees });
    }
    let union: FxHashSet<Point> = zs.iter().flat_map(|z| p0[z].points.iter().copied()).collect();
    let inner: Vec<bool> = order
        .interior
        .iter()
        .map(|x| first_hit(&p0[x], &union).is_some_and(|q| agree_through(&pg[x], &p0[x], q)))
        .collect();
    let success = pairs.iter().all(PairFlags::ok) && inner.iter().all(|&ok| ok);
    RadiusOutcome { m, pairs, inner, success }
}

/// Critical-side paths of one replica, shared by every γ.
pub struct D3Zero {
    order: BoundaryOrder,
    stacks: ArrowStacks,
    paths: Option<PathMap>,
    heights: Option<Vec<u8>>,
}

impl D3Zero {
    pub fn new(cfg: &D3Config, stack_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let order = boundary_enumeration(3, cfg.k)?;
        let mut stacks = ArrowStacks::new(3, stack_seed);
        let paths = grow_side(&order, &mut stacks, cfg.n_big, None, cfg.budget);
        let heights = paths.as_ref().map(|p| box_heights(3, &order.interior, p)).transpose()?;
        Ok(D3Zero { order, stacks, paths, heights })
    }

    pub fn heights(&self) -> Option<&Vec<u8>> {
        self.heights.as_ref()
    }

    /// The dissipative side from the same stacks, and the comparison.
    pub fn couple(&mut self, cfg: &D3Config, gamma: f64) -> Result<CouplingReport> {
        if !(gamma >= 0.0) {
            return Err(Error::InvalidParams(format!("gamma = {gamma}")));
        }
        let lambda = KillingLaw::from_gamma(3, gamma)?.lambda();
        let pg = grow_side(&self.order, &mut self.stacks, cfg.n_big, Some(marker_threshold(lambda)), cfg.budget);
        let heights_gamma = pg.as_ref().map(|p| box_heights(3, &self.order.interior, p)).transpose()?;
        let (radii, inconclusive) = match (&self.paths, &pg) {
            (Some(p0), Some(pg)) => (cfg.m_grid.iter().map(|&m| evaluate_d3(&self.order, m, p0, pg)).collect(), false),
            _ => (Vec::new(), true),
        };
        let success = !inconclusive && radii.iter().any(|r: &RadiusOutcome| r.success);
        Ok(CouplingReport {
            d: 3,
            k: cfg.k,
            gamma,
            lambda,
            truncation: cfg.n_big,
            seed: self.stacks.seed(),
            radii,
            planar: None,
            success,
            inconclusive,
            heights0: self.heights.clone(),
            heights_gamma,
        })
    }
}

/// Heights on B(k) of a dissipative tree grown from its own stacks.
pub fn d3_gamma_heights(cfg: &D3Config, gamma: f64, stack_seed: u64) -> Result<Option<Vec<u8>>> {
    let order = boundary_enumeration(3, cfg.k)?;
    let lambda = KillingLaw::from_gamma(3, gamma)?.lambda();
    let mut stacks = ArrowStacks::new(3, stack_seed);
    let paths = grow_side(&order, &mut stacks, cfg.n_big, Some(marker_threshold(lambda)), cfg.budget);
    paths.map(|p| box_heights(3, &order.interior, &p)).transpose()
}

/// One replica of the three-dimensional coupling at a single γ.
pub fn run_coupling_replica_d3<R: Rng + ?Sized>(cfg: &D3Config, gamma: f64, rng: &mut R) -> Result<CouplingReport> {
    D3Zero::new(cfg, rng.random())?.couple(cfg, gamma)
}

/// Scales of the planar coupling derived from λ.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct D2Schedule {
    pub lambda: f64,
    pub m: u32,
    pub r_prime: u32,
    pub r: u32,
    pub n: u32,
    pub beta: f64,
    /// λ ≤ c₀·(2k)^(−C₀).
    pub lambda_ok: bool,
    pub beta_ok: bool,
    pub warnings: Vec<String>,
}

/// Guard constants for the planar schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct D2Guard {
    pub c0: f64,
    pub big_c0: f64,
}

impl Default for D2Guard {
    fn default() -> Self {
        D2Guard { c0: 1.0, big_c0: 23.0 }
    }
}

/// m = λ^(−1/23), R′ = λ^(−3/46), R = 4λ^(−3/23), n = λ^(−13/46), R^β = n.
pub fn d2_parameter_schedule(lambda: f64, k: u32, guard: D2Guard) -> Result<D2Schedule> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidParams(format!("lambda = {lambda} must lie in (0, 1)")));
    }
    let scale = |e: f64, c: f64| (c * lambda.powf(-e)).round().max(1.0) as u32;
    let m = scale(1.0 / 23.0, 1.0);
    let r_prime = scale(3.0 / 46.0, 1.0);
    let r = scale(3.0 / 23.0, 4.0);
    let n = scale(13.0 / 46.0, 1.0);
    let beta = if r > 1 { (n as f64).ln() / (r as f64).ln() } else { f64::INFINITY };
    let mut warnings = Vec::new();
    if 16 * m >= r_prime {
        if m < r_prime {
            warnings.push(format!("16m < R' fails after rounding (m = {m}, R' = {r_prime}); using m < R'"));
        } else {
            warnings.push(format!("m < R' fails after rounding (m = {m}, R' = {r_prime})"));
        }
    }
    if !(r < n) {
        warnings.push(format!("R < n fails after rounding (R = {r}, n = {n})"));
    }
    let beta_ok = beta > 2.0;
    if !beta_ok {
        warnings.push(format!("beta>2 unmet (beta = {beta:.4})"));
    }
    let lambda_ok = lambda <= guard.c0 * (2.0 * k.max(1) as f64).powf(-guard.big_c0);
    if !lambda_ok {
        warnings.push(format!("lambda = {lambda:e} above the guard c0*(2k)^-C0"));
    }
    if 2 * k >= m {
        warnings.push(format!("2k < m fails (k = {k}, m = {m})"));
    }
    Ok(D2Schedule { lambda, m, r_prime, r, n, beta, lambda_ok, beta_ok, warnings })
}

/// Parameters of the planar coupling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct D2Config {
    pub k: u32,
    pub guard: D2Guard,
    /// Radius of the wired ball for the critical side; default 4R.
    pub n_fin: Option<u32>,
    /// Walk steps per replica.
    pub budget: u64,
}

impl D2Config {
    pub fn new(k: u32) -> Self {
        D2Config { k, guard: D2Guard::default(), n_fin: None, budget: 200_000_000 }
    }
}

/// Forest grown from loop-erased walk segments.
struct WalkForest {
    parent: FxHashMap<Point, EdgeSlot>,
    radius: Option<f64>,
}

impl WalkForest {
    fn new(radius: Option<f64>) -> Self {
        WalkForest { parent: FxHashMap::default(), radius }
    }

    fn inside(&self, p: &Point) -> bool {
        self.radius.is_none_or(|r| in_ball(p, r))
    }

    fn resolved(&self, p: &Point) -> bool {
        self.parent.contains_key(p) || !self.inside(p)
    }

    /// Adds LE(segment); the last point is either in the forest or outside
    /// the region, unless `killed`, in which case it gets a dissipative edge.
    fn attach(&mut self, segment: &[Point], killed: bool) -> Result<()> {
        let le = loop_erase(segment)?;
        for w in le.windows(2) {
            let dir = Direction::between(&w[0], &w[1]).expect("walk steps are lattice steps");
            self.parent.insert(w[0], EdgeSlot::Ord(dir));
        }
        if killed {
            self.parent.insert(*le.last().unwrap(), EdgeSlot::Diss);
        }
        Ok(())
    }

    fn path_from(&self, start: &Point) -> Option<TreePath> {
        let mut points = Vec::new();
        let mut cur = *start;
        loop {
            let slot = *self.parent.get(&cur)?;
            points.push(cur);
            match slot {
                EdgeSlot::Diss => return Some(TreePath { points, end: PathEnd::Root(slot) }),
                EdgeSlot::Ord(dir) => {
                    let next = step(&cur, dir);
                    if !self.inside(&next) {
                        return Some(TreePath { points, end: PathEnd::Root(slot) });
                    }
                    cur = next;
                }
            }
        }
    }
}

/// One replica of the planar coupling: shared walks S^i with clocks T^i
/// build the critical tree in the wired ball of radius N_fin and the
/// dissipative tree on Z², from the origin, then z₁..z_N, then B(k).
pub fn run_coupling_replica_d2<R: Rng + ?Sized>(cfg: &D2Config, gamma: f64, rng: &mut R) -> Result<CouplingReport> {
    if cfg.k == 0 {
        return Err(Error::InvalidParams("the planar coupling needs k >= 1".into()));
    }
    let law = KillingLaw::from_gamma(2, gamma)?;
    let lambda = law.lambda();
    let schedule = d2_parameter_schedule(lambda, cfg.k, cfg.guard)?;
    let n_fin = cfg.n_fin.unwrap_or(4 * schedule.r);
    let m = schedule.m as f64;
    if (n_fin as f64) <= m + 1.0 || n_fin <= cfg.k + 1 {
        return Err(Error::Config(format!("N_fin = {n_fin} too small for m = {m} and k = {}", cfg.k)));
    }
    let order = boundary_enumeration(2, cfg.k)?;
    let mut zero = WalkForest::new(Some(n_fin as f64));
    let mut diss = WalkForest::new(None);
    let mut left = cfg.budget;
    let mut origin_set: FxHashSet<Point> = FxHashSet::default();
    let mut origin_agrees = false;
    let mut boundary = Vec::new();
    let mut inner = Vec::new();
    let mut inconclusive = false;

    let starts: Vec<(Point, u8)> = std::iter::once(([0; 3], 0))
        .chain(order.boundary.iter().map(|z| (*z, 1)))
        .chain(order.interior.iter().filter(|z| **z != [0; 3]).map(|z| (*z, 2)))
        .collect();
    for (z, kind) in starts {
        let t = law.sample(rng);
        let mut s = vec![z];
        let mut r0 = None;
        let mut rg = None;
        let mut hit_origin = None;
        let mut exit_m = None;
        loop {
            let j = s.len() - 1;
            let cur = s[j];
            if r0.is_none() && zero.resolved(&cur) {
                r0 = Some(j);
            }
            if rg.is_none() && (diss.resolved(&cur) || j as u64 == t) {
                rg = Some(j);
            }
            if hit_origin.is_none() && origin_set.contains(&cur) {
                hit_origin = Some(j);
            }
            if exit_m.is_none() && !in_ball(&cur, m) {
                exit_m = Some(j);
            }
            let events_done = kind == 0 || exit_m.is_some() || j as u64 >= t;
            if r0.is_some() && rg.is_some() && events_done {
                break;
            }
            if left == 0 {
                inconclusive = true;
                break;
            }
            left -= 1;
            let dir = Direction(((rng.random::<u32>() as u64 * 4) >> 32) as u8);
            s.push(step(&cur, dir));
        }
        if inconclusive {
            break;
        }
        let (r0, rg) = (r0.unwrap(), rg.unwrap());
        if !zero.parent.contains_key(&z) {
            zero.attach(&s[..=r0], false)?;
        }
        if !diss.parent.contains_key(&z) {
            let killed = rg as u64 == t && !diss.parent.contains_key(&s[rg]);
            diss.attach(&s[..=rg], killed)?;
        }
        let survives = exit_m.is_some_and(|e| t > e as u64);
        match kind {
            0 => {
                let p0 = zero.path_from(&z).expect("origin attached");
                let pg = diss.path_from(&z).expect("origin attached");
                origin_set = p0.points.iter().copied().collect();
                let last = last_in_ball(&p0.points, m).max(last_in_ball(&pg.points, m)).unwrap_or(0);
                origin_agrees = agree_through(&pg, &p0, last + 1);
            }
            1 => boundary.push(survives && hit_origin.zip(exit_m).is_some_and(|(h, e)| h < e)),
            _ => inner.push(survives),
        }
    }

    let collect = |f: &WalkForest| -> Option<PathMap> {
        order.all().map(|z| f.path_from(z).map(|p| (*z, p))).collect()
    };
    let (heights0, heights_gamma) = if inconclusive {
        (None, None)
    } else {
        let p0 = collect(&zero).expect("all starts attached");
        let pg = collect(&diss).expect("all starts attached");
        (Some(box_heights(2, &order.interior, &p0)?), Some(box_heights(2, &order.interior, &pg)?))
    };
    let success = !inconclusive && origin_agrees && boundary.iter().all(|&b| b) && inner.iter().all(|&b| b);
    Ok(CouplingReport {
        d: 2,
        k: cfg.k,
        gamma,
        lambda,
        truncation: n_fin as f64,
        seed: 0,
        radii: Vec::new(),
        planar: Some(PlanarEvents { schedule, n_fin, origin_agrees, boundary, inner }),
        success,
        inconclusive,
        heights0,
        heights_gamma,
    })
}

/// A cylinder event on the star heights of B(k).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    /// The whole configuration space.
    Full,
    /// The height at `site` is one of `heights`.
    SiteHeight { site: Vec<i32>, heights: Vec<u8> },
    /// Some site of B(k) has a height in `heights`.
    AnySiteHeight { heights: Vec<u8> },
}

impl Event {
    /// Index into the B(k) height vector, checking the event is local to B(k).
    fn site_index(&self, d: usize, k: u32) -> Result<Option<usize>> {
        match self {
            Event::Full | Event::AnySiteHeight { .. } => Ok(None),
            Event::SiteHeight { site, .. } => {
                if site.len() != d {
                    return Err(Error::InvalidParams(format!("event site needs {d} coordinates")));
                }
                let mut p: Point = [0; 3];
                p[..d].copy_from_slice(site);
                let cube = BoxDomain::build(d, k, Shape::Cube)?;
                let i = cube.index_of(&p).ok_or_else(|| {
                    Error::InvalidParams(format!("event depends on {p:?}, outside B({k})"))
                })?;
                Ok(Some(i as usize))
            }
        }
    }

    pub fn check(&self, d: usize, k: u32) -> Result<()> {
        self.site_index(d, k).map(|_| ())
    }

    pub fn holds(&self, d: usize, k: u32, heights: &[u8]) -> Result<bool> {
        Ok(match (self, self.site_index(d, k)?) {
            (Event::SiteHeight { heights: hs, .. }, Some(i)) => hs.contains(&heights[i]),
            (Event::AnySiteHeight { heights: hs }, _) => heights.iter().any(|h| hs.contains(h)),
            _ => true,
        })
    }
}

/// Which experiment a rate run drives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "d")]
pub enum Experiment {
    #[serde(rename = "3")]
    D3(D3Config),
    #[serde(rename = "2")]
    D2(D2Config),
}

impl Experiment {
    pub fn dim(&self) -> usize {
        match self {
            Experiment::D3(_) => 3,
            Experiment::D2(_) => 2,
        }
    }

    pub fn k(&self) -> u32 {
        match self {
            Experiment::D3(c) => c.k,
            Experiment::D2(c) => c.k,
        }
    }
}

const INDEPENDENT_STREAM: u64 = 0x1d_e9e4_d3e7;

/// What one replica contributes to every γ of a rate run.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicaOutcome {
    pub coupled: Vec<CouplingReport>,
    /// Dissipative heights from randomness independent of the critical side.
    pub independent: Vec<Option<Vec<u8>>>,
    /// Critical heights (shared by every γ in d = 3).
    pub heights0: Option<Vec<u8>>,
}

/// Runs replica `replica` of `exp` at every γ. Seeds depend only on
/// (`seed`, `replica`), so the outcome does not depend on scheduling.
pub fn run_replica(exp: &Experiment, gammas: &[f64], seed: u64, replica: u64, independent: bool) -> Result<ReplicaOutcome> {
    match exp {
        Experiment::D3(cfg) => {
            let mut zero = D3Zero::new(cfg, mix_seed(seed, replica))?;
            let coupled = gammas.iter().map(|&g| zero.couple(cfg, g)).collect::<Result<Vec<_>>>()?;
            let independent = if independent {
                gammas
                    .iter()
                    .enumerate()
                    .map(|(gi, &g)| d3_gamma_heights(cfg, g, mix_seed(seed ^ INDEPENDENT_STREAM, replica * 64 + gi as u64)))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            Ok(ReplicaOutcome { heights0: zero.heights().cloned(), coupled, independent })
        }
        Experiment::D2(cfg) => {
            let mut coupled = Vec::new();
            let mut independent_h = Vec::new();
            for (gi, &g) in gammas.iter().enumerate() {
                let mut rng = stream_rng(mix_seed(seed, gi as u64), replica);
                let mut report = run_coupling_replica_d2(cfg, g, &mut rng)?;
                report.seed = seed;
                coupled.push(report);
                if independent {
                    let mut rng = stream_rng(mix_seed(seed ^ INDEPENDENT_STREAM, gi as u64), replica);
                    independent_h.push(run_coupling_replica_d2(cfg, g, &mut rng)?.heights_gamma);
                }
            }
            let heights0 = coupled.first().and_then(|r| r.heights0.clone());
            Ok(ReplicaOutcome { coupled, independent: independent_h, heights0 })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GapMode {
    Coupled,
    Independent,
}

/// Per-γ summary of a rate run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapEstimate {
    pub gamma: f64,
    pub replicas: u64,
    /// Coupling failures, inconclusive replicas included.
    pub failures: u64,
    pub inconclusive: u64,
    pub fail_rate: f64,
    pub fail_se: f64,
    /// Mean of 1_E(ξ^γ) − 1_E(ξ^0) over coupled pairs.
    pub gap_coupled: f64,
    pub gap_coupled_se: f64,
    /// Difference of two independent estimates; NaN when not computed.
    pub gap_indep: f64,
    pub gap_indep_se: f64,
    /// Replicas where success came with different heights (must be 0).
    pub height_violations: u64,
    /// Replicas breaking the union-bound accounting (must be 0).
    pub union_violations: u64,
}

impl GapEstimate {
    pub fn failure(&self) -> Proportion {
        Proportion::new(self.failures, self.replicas)
    }

    /// |independent gap| ≤ failure rate + 3·combined standard error.
    pub fn dominated(&self) -> bool {
        if self.gap_indep.is_nan() {
            return true;
        }
        let se = (self.gap_indep_se.powi(2) + self.fail_se.powi(2)).sqrt();
        self.gap_indep.abs() <= self.fail_rate + 3.0 * se
    }
}

fn indicator_mean(event: &Event, d: usize, k: u32, hs: &[Option<Vec<u8>>]) -> Result<(f64, f64, u64)> {
    let xs = hs
        .iter()
        .flatten()
        .map(|h| event.holds(d, k, h).map(|b| b as u8 as f64))
        .collect::<Result<Vec<_>>>()?;
    let (mean, se) = mean_se(&xs);
    Ok((mean, se, xs.len() as u64))
}

/// Failure rates do not increase significantly as γ decreases: for each
/// pair of consecutive γ values the 95% intervals overlap or the rate at
/// the smaller γ is lower.
pub fn fail_rate_ci_monotone(estimates: &[GapEstimate]) -> bool {
    let mut sorted: Vec<&GapEstimate> = estimates.iter().collect();
    sorted.sort_by(|a, b| b.gamma.total_cmp(&a.gamma));
    sorted.windows(2).all(|w| {
        let (_, hi) = w[0].failure().wilson_interval(1.96);
        let (lo, _) = w[1].failure().wilson_interval(1.96);
        lo <= hi
    })
}

/// Summarizes replica outcomes into one estimate per γ.
pub fn summarize(event: &Event, exp: &Experiment, gammas: &[f64], outcomes: &[ReplicaOutcome]) -> Result<Vec<GapEstimate>> {
    let (d, k) = (exp.dim(), exp.k());
    let n = outcomes.len() as u64;
    gammas
        .iter()
        .enumerate()
        .map(|(gi, &gamma)| {
            let reports: Vec<&CouplingReport> = outcomes.iter().map(|o| &o.coupled[gi]).collect();
            let failures = reports.iter().filter(|r| !r.success).count() as u64;
            let inconclusive = reports.iter().filter(|r| r.inconclusive).count() as u64;
            let mut diffs = Vec::new();
            for r in &reports {
                if let (Some(h0), Some(hg)) = (&r.heights0, &r.heights_gamma) {
                    diffs.push(event.holds(d, k, hg)? as u8 as f64 - event.holds(d, k, h0)? as u8 as f64);
                }
            }
            let (gap_coupled, gap_coupled_se) = mean_se(&diffs);
            let (gap_indep, gap_indep_se) = if outcomes.iter().all(|o| o.independent.len() > gi) {
                let zero: Vec<Option<Vec<u8>>> = reports.iter().map(|r| r.heights0.clone()).collect();
                let ind: Vec<Option<Vec<u8>>> = outcomes.iter().map(|o| o.independent[gi].clone()).collect();
                let (m0, s0, _) = indicator_mean(event, d, k, &zero)?;
                let (mg, sg, _) = indicator_mean(event, d, k, &ind)?;
                (mg - m0, (s0 * s0 + sg * sg).sqrt())
            } else {
                (f64::NAN, f64::NAN)
            };
            let fail = Proportion::new(failures, n);
            Ok(GapEstimate {
                gamma,
                replicas: n,
                failures,
                inconclusive,
                fail_rate: fail.mean(),
                fail_se: fail.se(),
                gap_coupled,
                gap_coupled_se,
                gap_indep,
                gap_indep_se,
                height_violations: reports.iter().filter(|r| !r.heights_consistent()).count() as u64,
                union_violations: reports.iter().filter(|r| !r.union_bound_holds()).count() as u64,
            })
        })
        .collect()
}

/// Estimates the gap |m^(γ)(E) − m^(0)(E)| at each γ. Coupled mode also
/// reports the coupling failure rate, an upper bound for the gap;
/// independent mode differences two separate estimates.
pub fn estimate_event_gap(
    event: &Event,
    exp: &Experiment,
    gammas: &[f64],
    replicas: u64,
    seed: u64,
    mode: GapMode,
) -> Result<Vec<GapEstimate>> {
    if replicas == 0 {
        return Err(Error::InvalidParams("replicas must be positive".into()));
    }
    if gammas.is_empty() || gammas.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
        return Err(Error::InvalidParams("gammas must be positive and finite".into()));
    }
    event.check(exp.dim(), exp.k())?;
    let independent = mode == GapMode::Independent;
    let outcomes = map_replicas(replicas, |r| run_replica(exp, gammas, seed, r, independent))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    summarize(event, exp, gammas, &outcomes)
}

/// Log-log fit of a gap (or its upper bound) against γ.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateFit {
    /// (γ, value, standard error) of the points used.
    pub points: Vec<(f64, f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub slope_ci: (f64, f64),
    pub note: String,
}

/// Weighted least squares of log(value) on log(γ), weighting each point by
/// (value / se)². Points that are not CI-separated from 0 are dropped.
pub fn fit_rate(points: &[(f64, f64, f64)]) -> Result<RateFit> {
    let used: Vec<(f64, f64, f64)> = points
        .iter()
        .copied()
        .filter(|&(g, v, se)| g > 0.0 && v > 0.0 && v > 1.96 * se.max(0.0))
        .collect();
    if used.len() < 2 {
        return Err(Error::InvalidParams(format!("{} usable points, need at least 2", used.len())));
    }
    let x: Vec<f64> = used.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = used.iter().map(|p| p.1.ln()).collect();
    let exact = used.iter().all(|p| p.2 <= 0.0);
    let w: Vec<f64> = used
        .iter()
        .map(|&(_, v, se)| if exact { 1.0 } else { (v / se.max(v * 1e-9)).powi(2) })
        .collect();
    let fit = weighted_linear_fit(&x, &y, &w)?;
    let slope_se = if exact { 0.0 } else { fit.slope_se };
    Ok(RateFit {
        points: used,
        slope: fit.slope,
        intercept: fit.intercept,
        slope_se,
        slope_ci: (fit.slope - 1.96 * slope_se, fit.slope + 1.96 * slope_se),
        note: "empirical exponent, not a verification of eta".into(),
    })
}

/// Escape statistics of walks started next to a loop-erased obstacle.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BeurlingEstimate {
    pub m: u32,
    pub radii: Vec<u32>,
    /// Per obstacle, per radius: fraction of walks leaving 𝔅(N) before hitting.
    pub per_obstacle: Vec<Vec<f64>>,
    /// Maximum over obstacles, per radius.
    pub sup: Vec<f64>,
    pub fit: Option<RateFit>,
}

/// For each of `obstacles` loop-erased walks A from the origin to the exit
/// of 𝔅(max N), starts `replicas` walks at the point of the inner boundary
/// of 𝔅(m) farthest from A and records P̂[τ_N < ξ_A] for every N.
pub fn beurling_escape(m: u32, radii: &[u32], obstacles: u64, replicas: u64, seed: u64) -> Result<BeurlingEstimate> {
    if radii.is_empty() || radii.iter().any(|&n| n <= m) {
        return Err(Error::InvalidParams("radii must exceed m".into()));
    }
    let big = *radii.iter().max().unwrap();
    let inner_boundary: Vec<Point> = BoxDomain::build(2, m, Shape::Ball)?
        .sites()
        .iter()
        .copied()
        .filter(|p| Direction::all(2).any(|dir| !in_ball(&step(p, dir), m as f64)))
        .collect();
    let per_obstacle = map_replicas(obstacles, |o| -> Result<Vec<f64>> {
        let mut rng = stream_rng(seed, o);
        let mut s = vec![[0i32; 3]];
        while in_ball(s.last().unwrap(), big as f64) {
            let cur = *s.last().unwrap();
            s.push(step(&cur, Direction(rng.random_range(0..4))));
        }
        let a = loop_erase(&s)?;
        let set = PointSet::from_points(2, big + 1, &a);
        let dist2 = |p: &Point| {
            a.iter()
                .map(|q| (p[0] - q[0]).pow(2) as i64 + (p[1] - q[1]).pow(2) as i64)
                .min()
                .unwrap()
        };
        let z = *inner_boundary
            .iter()
            .max_by(|p, q| dist2(p).cmp(&dist2(q)).then_with(|| q.cmp(p)))
            .unwrap();
        let mut escapes = vec![0u64; radii.len()];
        for _ in 0..replicas {
            let mut cur = z;
            let mut reach2: i64 = 0;
            while !set.contains(&cur) && in_ball(&cur, big as f64) {
                cur = step(&cur, Direction(((rng.random::<u32>() as u64 * 4) >> 32) as u8));
                reach2 = reach2.max(cur[0] as i64 * cur[0] as i64 + cur[1] as i64 * cur[1] as i64);
            }
            for (i, &n) in radii.iter().enumerate() {
                if reach2 > (n as i64).pow(2) {
                    escapes[i] += 1;
                }
            }
        }
        Ok(escapes.iter().map(|&e| e as f64 / replicas as f64).collect())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let sup: Vec<f64> = (0..radii.len())
        .map(|i| per_obstacle.iter().map(|v| v[i]).fold(0.0, f64::max))
        .collect();
    let pts: Vec<(f64, f64, f64)> = radii
        .iter()
        .zip(&sup)
        .map(|(&n, &p)| {
            let se = (p * (1.0 - p) / replicas as f64).sqrt();
            (n as f64 / m as f64, p, se)
        })
        .collect();
    let fit = fit_rate(&pts).ok();
    Ok(BeurlingEstimate { m, radii: radii.to_vec(), per_obstacle, sup, fit })
}
