//! Wilson's algorithm on the wired graph, the arrow-stack realization used
//! to couple the critical and dissipative trees, and the two-path sampler.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::Serialize;

use crate::bijection::{PathEnd, SpanningTree, TreePath};
use crate::error::{Error, Result};
use crate::lattice::{in_ball, step, BoxDomain, Direction, DissipativeGraph, EdgeSlot, Node, Point};
use crate::walks::{loop_erase, KillingLaw};

fn check_order(domain: &BoxDomain, order: &[u32]) -> Result<()> {
    let mut seen = vec![false; domain.len()];
    for &x in order {
        let slot = seen
            .get_mut(x as usize)
            .ok_or_else(|| Error::InvalidParams(format!("order lists unknown site {x}")))?;
        *slot = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::InvalidParams("order does not cover the domain".into()));
    }
    Ok(())
}

fn check_gamma(graph: &DissipativeGraph, gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParams(format!("gamma = {gamma}")));
    }
    if gamma > 0.0 && !graph.is_dissipative() {
        return Err(Error::InvalidParams("gamma > 0 needs a graph with dissipative edges".into()));
    }
    Ok(KillingLaw::from_gamma(graph.dim(), gamma)?.lambda())
}

/// Samples a spanning tree with weight γ^H(t) by loop-erased walks started
/// at the sites of `order` in turn.
pub fn wilson_sample<R: Rng + ?Sized>(
    graph: &DissipativeGraph,
    gamma: f64,
    order: &[u32],
    rng: &mut R,
) -> Result<SpanningTree> {
    let domain = graph.domain();
    check_order(domain, order)?;
    let lambda = check_gamma(graph, gamma)?;
    let d = domain.dim();
    let n = domain.len();
    let mut in_tree = vec![false; n];
    let mut next = vec![EdgeSlot::Diss; n];
    for &start in order {
        let mut x = start;
        while !in_tree[x as usize] {
            let slot = if lambda > 0.0 && rng.random::<f64>() < lambda {
                EdgeSlot::Diss
            } else {
                EdgeSlot::Ord(Direction(rng.random_range(0..2 * d as u8)))
            };
            next[x as usize] = slot;
            match graph.target(x, slot) {
                Node::Site(y) => x = y,
                Node::Root => break,
            }
        }
        let mut x = start;
        while !in_tree[x as usize] {
            in_tree[x as usize] = true;
            match graph.target(x, next[x as usize]) {
                Node::Site(y) => x = y,
                Node::Root => break,
            }
        }
    }
    Ok(SpanningTree { parent: next })
}

/// One arrow of a stack: a direction and a uniform 64-bit mark. The arrow
/// carries a red marker at level λ when `mark < λ·2^64`, so one stack
/// serves every λ at once.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arrow {
    pub dir: Direction,
    pub mark: u64,
}

impl Arrow {
    #[inline]
    pub fn is_marked(&self, threshold: u64) -> bool {
        self.mark < threshold
    }
}

/// Marker threshold for kill probability λ.
pub fn marker_threshold(lambda: f64) -> u64 {
    if lambda <= 0.0 {
        0
    } else {
        (lambda * 2f64.powi(64)).min(u64::MAX as f64) as u64
    }
}

const CHUNK: usize = 16;
const WORDS_PER_ARROW: usize = 3;

/// Lazily generated i.i.d. arrow stacks on Z^d. The arrow at depth `i` of
/// the stack at `p` is a fixed function of (seed, p, i), independent of
/// the order in which stacks are explored.
#[derive(Clone, Debug)]
pub struct ArrowStacks {
    d: usize,
    seed: u64,
    stacks: FxHashMap<u64, Vec<Arrow>>,
}

fn site_key(p: &Point) -> u64 {
    const OFFSET: i64 = 1 << 20;
    p.iter().fold(0u64, |k, &c| (k << 21) | ((c as i64 + OFFSET) as u64 & 0x1f_ffff))
}

impl ArrowStacks {
    pub fn new(d: usize, seed: u64) -> Self {
        ArrowStacks { d, seed, stacks: FxHashMap::default() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Arrow at depth `depth` of the stack at `p`.
    pub fn arrow(&mut self, p: &Point, depth: usize) -> Arrow {
        let key = site_key(p);
        let stack = self.stacks.entry(key).or_default();
        while stack.len() <= depth {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(key);
            rng.set_word_pos((stack.len() * WORDS_PER_ARROW) as u128);
            let two_d = 2 * self.d as u64;
            for _ in 0..CHUNK {
                let dir = Direction(((rng.next_u32() as u64 * two_d) >> 32) as u8);
                let mark = rng.next_u64();
                stack.push(Arrow { dir, mark });
            }
        }
        stack[depth]
    }

    /// Number of sites whose stack has been touched.
    pub fn touched(&self) -> usize {
        self.stacks.len()
    }
}

/// Where the wired graph lives: the sites of a box domain or a closed
/// Euclidean ball, every other vertex being identified with the root.
#[derive(Clone, Copy, Debug)]
pub enum Region<'a> {
    Domain(&'a BoxDomain),
    Ball(f64),
}

impl Region<'_> {
    #[inline]
    pub fn contains(&self, p: &Point) -> bool {
        match self {
            Region::Domain(dom) => dom.contains(p),
            Region::Ball(r) => in_ball(p, *r),
        }
    }
}

/// Arrow accounting of a stack-driven run: every consumed arrow is either
/// popped with a cycle or ends up as a tree edge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PopAudit {
    pub consumed: u64,
    pub popped: u64,
    pub tree_edges: u64,
}

impl PopAudit {
    pub fn balanced(&self) -> bool {
        self.consumed == self.popped + self.tree_edges
    }
}

/// Outcome of growing one branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Done,
    /// The step budget ran out; the forest is unchanged.
    OutOfBudget,
}

/// A growing forest ℱ₀ ⊂ ℱ₁ ⊂ … built by cycle popping on shared arrow
/// stacks. With a marker threshold, marked arrows point to the root through
/// the dissipative edge; without one, markers are ignored.
#[derive(Clone, Debug)]
pub struct StackForest<'a> {
    region: Region<'a>,
    threshold: Option<u64>,
    parent: FxHashMap<Point, EdgeSlot>,
    depth: FxHashMap<Point, u32>,
    audit: PopAudit,
    path: Vec<Point>,
    slots: Vec<EdgeSlot>,
    pos: FxHashMap<Point, usize>,
}

impl<'a> StackForest<'a> {
    pub fn new(region: Region<'a>, threshold: Option<u64>) -> Self {
        StackForest {
            region,
            threshold,
            parent: FxHashMap::default(),
            depth: FxHashMap::default(),
            audit: PopAudit::default(),
            path: Vec::new(),
            slots: Vec::new(),
            pos: FxHashMap::default(),
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.parent.contains_key(p)
    }

    pub fn parent(&self, p: &Point) -> Option<EdgeSlot> {
        self.parent.get(p).copied()
    }

    pub fn audit(&self) -> PopAudit {
        self.audit
    }

    /// Follows arrows from `start` until the current forest or the root is
    /// reached, popping every cycle on the way. `budget` is decreased by the
    /// number of arrows read.
    pub fn add_branch(&mut self, stacks: &mut ArrowStacks, start: Point, budget: &mut u64) -> Branch {
        if self.contains(&start) || !self.region.contains(&start) {
            return Branch::Done;
        }
        self.path.clear();
        self.slots.clear();
        self.pos.clear();
        let mut consumed = 0u64;
        let mut popped = 0u64;
        let mut used: Vec<(Point, u32)> = Vec::new();
        let mut cur = start;
        self.pos.insert(cur, 0);
        self.path.push(cur);
        loop {
            if consumed == *budget {
                for (p, k) in used {
                    *self.depth.get_mut(&p).unwrap() -= k;
                }
                *budget = 0;
                return Branch::OutOfBudget;
            }
            let depth = self.depth.entry(cur).or_insert(0);
            let arrow = stacks.arrow(&cur, *depth as usize);
            *depth += 1;
            match used.last_mut() {
                Some((p, k)) if *p == cur => *k += 1,
                _ => used.push((cur, 1)),
            }
            consumed += 1;
            if self.threshold.is_some_and(|t| arrow.is_marked(t)) {
                self.slots.push(EdgeSlot::Diss);
                break;
            }
            let next = step(&cur, arrow.dir);
            if !self.region.contains(&next) || self.contains(&next) {
                self.slots.push(EdgeSlot::Ord(arrow.dir));
                break;
            }
            if let Some(&i) = self.pos.get(&next) {
                // pop the cycle next → … → cur → next
                popped += (self.path.len() - i) as u64;
                for q in self.path.drain(i + 1..) {
                    self.pos.remove(&q);
                }
                self.slots.truncate(i);
                cur = next;
                continue;
            }
            self.slots.push(EdgeSlot::Ord(arrow.dir));
            self.pos.insert(next, self.path.len());
            self.path.push(next);
            cur = next;
        }
        *budget -= consumed;
        for (p, s) in self.path.iter().zip(&self.slots) {
            self.parent.insert(*p, *s);
        }
        self.audit.consumed += consumed;
        self.audit.popped += popped;
        self.audit.tree_edges += self.path.len() as u64;
        Branch::Done
    }

    /// Tree path from `start` to the root, if `start` is in the forest.
    pub fn path_from(&self, start: &Point) -> Option<TreePath> {
        let mut points = Vec::new();
        let mut cur = *start;
        loop {
            let slot = *self.parent.get(&cur)?;
            points.push(cur);
            match slot {
                EdgeSlot::Diss => return Some(TreePath { points, end: PathEnd::Root(slot) }),
                EdgeSlot::Ord(dir) => {
                    let next = step(&cur, dir);
                    if !self.region.contains(&next) {
                        return Some(TreePath { points, end: PathEnd::Root(slot) });
                    }
                    cur = next;
                }
            }
        }
    }

    /// Converts a forest covering `domain` into a spanning tree.
    pub fn to_tree(&self, domain: &BoxDomain) -> Result<SpanningTree> {
        let parent = domain
            .sites()
            .iter()
            .map(|p| self.parent(p).ok_or_else(|| Error::NotATree(format!("site {p:?} not reached"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(SpanningTree { parent })
    }
}

/// Result of one coupled run: the critical and dissipative trees built from
/// the same arrow stacks, with their arrow audits.
#[derive(Clone, Debug)]
pub struct CoupledTrees {
    pub tree0: SpanningTree,
    pub tree_gamma: SpanningTree,
    pub audit0: PopAudit,
    pub audit_gamma: PopAudit,
}

/// Cycle popping with markers ignored gives the critical tree; reading
/// marked arrows as jumps to the root gives the dissipative one.
pub fn coupled_wilson_pair<R: Rng + ?Sized>(
    graph: &DissipativeGraph,
    gamma: f64,
    order: &[u32],
    rng: &mut R,
) -> Result<CoupledTrees> {
    let domain = graph.domain();
    check_order(domain, order)?;
    let lambda = check_gamma(graph, gamma)?;
    let mut stacks = ArrowStacks::new(domain.dim(), rng.random());
    let mut zero = StackForest::new(Region::Domain(domain), None);
    let mut diss = StackForest::new(Region::Domain(domain), Some(marker_threshold(lambda)));
    let mut budget = u64::MAX;
    for &x in order {
        let p = domain.site(x);
        zero.add_branch(&mut stacks, p, &mut budget);
        diss.add_branch(&mut stacks, p, &mut budget);
    }
    Ok(CoupledTrees {
        tree0: zero.to_tree(domain)?,
        tree_gamma: diss.to_tree(domain)?,
        audit0: zero.audit(),
        audit_gamma: diss.audit(),
    })
}

/// The four loop-erased paths of the two-walk construction: S from the
/// origin and S¹ from `offset`, with independent killing clocks T and T¹.
#[derive(Clone, Debug, Serialize)]
pub struct Quadruple {
    /// LE(S) up to the exit of the truncation ball, standing in for LE(S[0,∞)).
    pub le_s_inf: Vec<Point>,
    /// LE(S[0, T]), unless T lies beyond the step budget.
    pub le_s_t: Option<Vec<Point>>,
    /// LE(S¹[0, ξ¹]), with ξ¹ the first hit of `le_s_inf`.
    pub le_s1_hit: Option<Vec<Point>>,
    /// LE(S¹[0, ξ^{1,λ} ∧ T¹]), with ξ^{1,λ} the first hit of `le_s_t`.
    pub le_s1_hit_or_kill: Option<Vec<Point>>,
    /// S¹ hits `le_s_inf` before leaving the ball of radius m.
    pub hits_before_exit: Option<bool>,
    /// T¹ ≥ τ¹_m.
    pub survives_exit: Option<bool>,
    /// LE(S[0,T]) agrees with `le_s_inf` through its last exit from the m-ball.
    pub agrees_to_last_exit: Option<bool>,
    /// LE(S[0,T]) ∩ S¹[0,T¹] = ∅.
    pub disjoint: Option<bool>,
}

impl Quadruple {
    /// (i′)–(iii′) all hold; undecided flags count as failures.
    pub fn success(&self) -> bool {
        self.hits_before_exit == Some(true)
            && self.survives_exit == Some(true)
            && self.agrees_to_last_exit == Some(true)
    }
}

/// Index of the last point of `path` inside the closed ball of radius `m`.
pub fn last_in_ball(path: &[Point], m: f64) -> Option<usize> {
    path.iter().rposition(|p| in_ball(p, m))
}

/// Samples the two-path quadruple in d = 3. The walk S runs until it has
/// left the ball of radius `n_big` and passed T; S¹ runs until every flag
/// is decided. Flags left undecided when `budget` moves are used up stay
/// `None`.
pub fn two_path_quadruple<R: Rng + ?Sized>(
    m: f64,
    n_big: f64,
    offset: Point,
    lambda: f64,
    budget: u64,
    rng: &mut R,
) -> Result<Quadruple> {
    if !(n_big > m && m > 0.0) {
        return Err(Error::InvalidParams(format!("need 0 < m < N_big, got m = {m}, N_big = {n_big}")));
    }
    let law = KillingLaw::new(lambda)?;
    let draw_dir = |rng: &mut R| Direction(((rng.random::<u32>() as u64 * 6) >> 32) as u8);
    let too_long = || Error::InvalidParams(format!("budget {budget} too small to leave the ball of radius {n_big}"));

    let t = law.sample(rng);
    let mut s = vec![[0i32; 3]];
    while in_ball(s.last().unwrap(), n_big) {
        if s.len() as u64 > budget {
            return Err(too_long());
        }
        let cur = *s.last().unwrap();
        s.push(step(&cur, draw_dir(rng)));
    }
    let tau_big = s.len() - 1;
    let le_s_inf = loop_erase(&s)?;
    let le_s_t = if t == u64::MAX {
        Some(le_s_inf.clone())
    } else if t as usize <= tau_big {
        Some(loop_erase(&s[..=t as usize])?)
    } else if t <= budget {
        while (s.len() as u64) <= t {
            let cur = *s.last().unwrap();
            s.push(step(&cur, draw_dir(rng)));
        }
        Some(loop_erase(&s)?)
    } else {
        None
    };

    let agrees_to_last_exit = le_s_t.as_ref().map(|le_t| {
        let last = last_in_ball(&le_s_inf, m).unwrap_or(0);
        let upto = (last + 1).min(le_s_inf.len() - 1);
        le_t.len() > upto && le_t[..=upto] == le_s_inf[..=upto]
    });

    let set_inf: FxHashSet<Point> = le_s_inf.iter().copied().collect();
    let set_t: Option<FxHashSet<Point>> = le_s_t.as_ref().map(|v| v.iter().copied().collect());
    let t1 = law.sample(rng);
    let mut s1 = vec![offset];
    let mut xi1: Option<usize> = None;
    let mut xi1_lambda: Option<usize> = None;
    let mut tau1_m: Option<usize> = None;
    let mut escaped_big = false;
    loop {
        let j = s1.len() - 1;
        let cur = s1[j];
        if xi1.is_none() && set_inf.contains(&cur) {
            xi1 = Some(j);
        }
        if xi1_lambda.is_none() && set_t.as_ref().is_some_and(|st| st.contains(&cur)) {
            xi1_lambda = Some(j);
        }
        if tau1_m.is_none() && !in_ball(&cur, m) {
            tau1_m = Some(j);
        }
        escaped_big |= !in_ball(&cur, n_big);
        let hit_done = xi1.is_some() || escaped_big;
        let kill_done = xi1_lambda.is_some() || j as u64 >= t1 || escaped_big;
        let exit_done = tau1_m.is_some() || j as u64 >= t1;
        if (hit_done && kill_done && exit_done) || j as u64 >= budget {
            break;
        }
        s1.push(step(&cur, draw_dir(rng)));
    }
    let end = s1.len() as u64 - 1;
    let hits_before_exit = match (xi1, tau1_m) {
        (Some(a), Some(b)) => Some(a < b),
        (Some(_), None) => Some(true),
        (None, Some(_)) => Some(false),
        (None, None) => None,
    };
    let survives_exit = match tau1_m {
        Some(b) => Some(t1 >= b as u64),
        None if end >= t1 => Some(false),
        None => None,
    };
    let le_s1_hit = xi1.map(|a| loop_erase(&s1[..=a])).transpose()?;
    let stop_lambda = match xi1_lambda {
        Some(a) => Some((a as u64).min(t1) as usize),
        None if end >= t1 => Some(t1 as usize),
        None => None,
    };
    let le_s1_hit_or_kill = stop_lambda.map(|a| loop_erase(&s1[..=a])).transpose()?;
    let disjoint = match xi1_lambda {
        Some(a) => Some(a as u64 > t1),
        None if set_t.is_some() && end >= t1 => Some(true),
        None => None,
    };
    Ok(Quadruple {
        le_s_inf,
        le_s_t,
        le_s1_hit,
        le_s1_hit_or_kill,
        hits_before_exit,
        survives_exit,
        agrees_to_last_exit,
        disjoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_wired_graph, Shape};
    use crate::rng::stream_rng;

    fn pair_graph(diss: bool) -> DissipativeGraph {
        build_wired_graph(BoxDomain::from_points(2, &[[0, 0, 0], [1, 0, 0]]).unwrap(), diss)
    }

    #[test]
    fn single_vertex_law() {
        let g = build_wired_graph(BoxDomain::build(2, 0, Shape::Cube).unwrap(), true);
        let mut rng = stream_rng(0, 0);
        let n = 50_000;
        let mut counts = [0u64; 5];
        for _ in 0..n {
            let t = wilson_sample(&g, 1.0, &[0], &mut rng).unwrap();
            counts[match t.parent[0] {
                EdgeSlot::Ord(d) => d.0 as usize,
                EdgeSlot::Diss => 4,
            }] += 1;
        }
        let p = crate::stats::chi_square_p_value(&counts, &[0.2; 5]).unwrap();
        assert!(p > 0.001, "p = {p}");
    }

    #[test]
    fn no_dissipative_parents_at_gamma_zero() {
        let g = build_wired_graph(BoxDomain::build(2, 2, Shape::Cube).unwrap(), true);
        let order: Vec<u32> = (0..25).collect();
        let mut rng = stream_rng(1, 0);
        for _ in 0..200 {
            let t = wilson_sample(&g, 0.0, &order, &mut rng).unwrap();
            assert_eq!(t.h(), 0);
            t.validate(&g).unwrap();
        }
        assert!(wilson_sample(&pair_graph(false), 0.5, &[0, 1], &mut rng).is_err());
        assert!(wilson_sample(&g, 0.0, &[0, 1], &mut rng).is_err());
    }

    #[test]
    fn stacks_do_not_depend_on_access_order() {
        let mut a = ArrowStacks::new(3, 9);
        let mut b = ArrowStacks::new(3, 9);
        let p = [1, -2, 3];
        let q = [-1, 0, 0];
        let fa: Vec<Arrow> = (0..40).map(|i| a.arrow(&p, i)).collect();
        for i in (0..40).rev() {
            b.arrow(&q, i);
        }
        let fb: Vec<Arrow> = (0..40).rev().map(|i| b.arrow(&p, i)).collect::<Vec<_>>().into_iter().rev().collect();
        assert_eq!(fa, fb);
        assert_ne!(a.arrow(&p, 0), a.arrow(&q, 0));
        assert_ne!(site_key(&[1, 0, 0]), site_key(&[0, 1, 0]));
        assert_eq!(marker_threshold(0.0), 0);
        assert_eq!(marker_threshold(0.5), 1 << 63);
    }

    #[test]
    fn coupled_pair_agrees_without_dissipation() {
        let g = build_wired_graph(BoxDomain::build(2, 2, Shape::Cube).unwrap(), true);
        let order: Vec<u32> = (0..25).collect();
        let mut rng = stream_rng(2, 0);
        for _ in 0..200 {
            let c = coupled_wilson_pair(&g, 0.0, &order, &mut rng).unwrap();
            assert_eq!(c.tree0, c.tree_gamma);
            assert!(c.audit0.balanced() && c.audit_gamma.balanced());
            assert_eq!(c.audit0.tree_edges, 25);
        }
    }

    #[test]
    fn coupled_pair_audit_with_markers() {
        let g = build_wired_graph(BoxDomain::build(2, 2, Shape::Cube).unwrap(), true);
        let order: Vec<u32> = (0..25).rev().collect();
        let mut rng = stream_rng(3, 0);
        let mut differ = 0;
        for _ in 0..200 {
            let c = coupled_wilson_pair(&g, 0.5, &order, &mut rng).unwrap();
            assert!(c.audit0.balanced() && c.audit_gamma.balanced());
            c.tree_gamma.validate(&g).unwrap();
            assert_eq!(c.tree0.h(), 0);
            differ += (c.tree0 != c.tree_gamma) as u32;
        }
        assert!(differ > 0);
    }

    #[test]
    fn budget_exhaustion_leaves_forest_unchanged() {
        let mut stacks = ArrowStacks::new(3, 4);
        let mut f = StackForest::new(Region::Ball(30.0), None);
        let mut budget = 5;
        assert_eq!(f.add_branch(&mut stacks, [0; 3], &mut budget), Branch::OutOfBudget);
        assert!(!f.contains(&[0; 3]));
        let mut budget = u64::MAX;
        assert_eq!(f.add_branch(&mut stacks, [0; 3], &mut budget), Branch::Done);
        let path = f.path_from(&[0; 3]).unwrap();
        assert!(!in_ball(&step(path.points.last().unwrap(), match path.end {
            PathEnd::Root(EdgeSlot::Ord(d)) => d,
            _ => panic!("no markers without threshold"),
        }), 30.0));
        // replaying from a fresh forest gives the same branch
        let mut g = StackForest::new(Region::Ball(30.0), None);
        let mut budget = u64::MAX;
        g.add_branch(&mut stacks, [0; 3], &mut budget);
        assert_eq!(g.path_from(&[0; 3]).unwrap(), path);
        assert!(f.audit().balanced());
    }

    #[test]
    fn quadruple_without_killing() {
        let mut rng = stream_rng(4, 0);
        for _ in 0..50 {
            let q = two_path_quadruple(4.0, 16.0, [1, 0, 0], 0.0, 1 << 22, &mut rng).unwrap();
            assert_eq!(Some(&q.le_s_inf), q.le_s_t.as_ref());
            assert_eq!(q.agrees_to_last_exit, Some(true));
            assert_eq!(q.survives_exit, Some(true));
        }
        assert!(two_path_quadruple(4.0, 2.0, [1, 0, 0], 0.0, 100, &mut rng).is_err());
    }
}
