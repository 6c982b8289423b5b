//! Simple random walks on Z^d with geometric killing, loop erasure and
//! cut times.

use std::hash::Hash;

use rand::Rng;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{check_dimension, in_ball, step, Direction, Point};
use crate::par::map_replicas;
use crate::rng::{mix_seed, stream_rng};
use crate::stats::Proportion;

/// Per-step probability λ = γ / (2d + γ) of jumping to the root.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KillingLaw {
    lambda: f64,
}

impl KillingLaw {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&lambda) {
            return Err(Error::InvalidParams(format!("kill probability {lambda} not in [0, 1)")));
        }
        Ok(KillingLaw { lambda })
    }

    pub fn from_gamma(d: usize, gamma: f64) -> Result<Self> {
        check_dimension(d)?;
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidParams(format!("gamma = {gamma}")));
        }
        Self::new(gamma / (2.0 * d as f64 + gamma))
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Number of completed moves before the jump to the root:
    /// P[T = t] = (1−λ)^t λ on {0, 1, …}. `u64::MAX` when λ = 0.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        if self.lambda == 0.0 {
            return u64::MAX;
        }
        // U in (0, 1]
        let u = 1.0 - rng.random::<f64>();
        let t = (u.ln() / (-self.lambda).ln_1p()).floor();
        if t >= u64::MAX as f64 {
            u64::MAX
        } else {
            t as u64
        }
    }
}

/// Set of lattice points with a dense bitmap on a cube around the origin
/// and a hash set elsewhere.
#[derive(Clone, Debug)]
pub struct PointSet {
    d: usize,
    r: i32,
    side: usize,
    bits: Vec<u64>,
    far: FxHashSet<Point>,
    len: usize,
}

impl PointSet {
    /// Dense storage on `[-r, r]^d`.
    pub fn new(d: usize, r: u32) -> Self {
        let side = 2 * r as usize + 1;
        let cells = side.pow(d as u32);
        PointSet {
            d,
            r: r as i32,
            side,
            bits: vec![0; cells.div_ceil(64)],
            far: FxHashSet::default(),
            len: 0,
        }
    }

    pub fn from_points<'a>(d: usize, r: u32, points: impl IntoIterator<Item = &'a Point>) -> Self {
        let mut s = Self::new(d, r);
        for p in points {
            s.insert(*p);
        }
        s
    }

    #[inline]
    fn cell(&self, p: &Point) -> Option<usize> {
        let mut idx = 0usize;
        for &c in &p[..self.d] {
            if c.abs() > self.r {
                return None;
            }
            idx = idx * self.side + (c + self.r) as usize;
        }
        Some(idx)
    }

    pub fn insert(&mut self, p: Point) -> bool {
        let fresh = match self.cell(&p) {
            Some(i) => {
                let (w, b) = (i / 64, 1u64 << (i % 64));
                let fresh = self.bits[w] & b == 0;
                self.bits[w] |= b;
                fresh
            }
            None => self.far.insert(p),
        };
        self.len += fresh as usize;
        fresh
    }

    #[inline]
    pub fn contains(&self, p: &Point) -> bool {
        match self.cell(p) {
            Some(i) => self.bits[i / 64] & (1u64 << (i % 64)) != 0,
            None => self.far.contains(p),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StopRule<'a> {
    /// Stop at the first site outside the closed ball of this radius.
    pub exit_radius: Option<f64>,
    /// Stop at the first visit to this set (the start counts).
    pub hit: Option<&'a PointSet>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Exit,
    Hit,
    Killed,
    Budget,
}

/// What the killing clock does when it rings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KillMode {
    /// End the trace at step T.
    Stop,
    /// Keep walking; only record T.
    Record,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WalkTrace {
    pub sites: Vec<Point>,
    /// Sampled killing clock T, possibly beyond the end of the trace.
    pub clock: Option<u64>,
    pub stop: StopReason,
}

impl WalkTrace {
    /// Number of completed moves.
    pub fn moves(&self) -> u64 {
        self.sites.len() as u64 - 1
    }

    /// T when the walk was killed within the recorded moves.
    pub fn killed_at(&self) -> Option<u64> {
        self.clock.filter(|&t| t <= self.moves())
    }

    pub fn last(&self) -> Point {
        *self.sites.last().expect("traces are never empty")
    }
}

/// Runs a simple random walk from `start` until a stop rule fires, the
/// killing clock rings (in [`KillMode::Stop`]) or `budget` moves are made.
/// Stop rules are checked on arrival, before the killing clock.
pub fn run_walk<R: Rng + ?Sized>(
    d: usize,
    start: Point,
    stop: &StopRule,
    killing: Option<KillingLaw>,
    mode: KillMode,
    budget: u64,
    rng: &mut R,
) -> WalkTrace {
    let clock = killing.map(|k| k.sample(rng));
    let kill_at = match mode {
        KillMode::Stop => clock.unwrap_or(u64::MAX),
        KillMode::Record => u64::MAX,
    };
    let mut sites = vec![start];
    let mut cur = start;
    let mut t = 0u64;
    let two_d = 2 * d as u64;
    let reason = loop {
        if stop.exit_radius.is_some_and(|r| !in_ball(&cur, r)) {
            break StopReason::Exit;
        }
        if stop.hit.is_some_and(|a| a.contains(&cur)) {
            break StopReason::Hit;
        }
        if t == kill_at {
            break StopReason::Killed;
        }
        if t == budget {
            break StopReason::Budget;
        }
        let dir = Direction(((rng.random::<u32>() as u64 * two_d) >> 32) as u8);
        cur = step(&cur, dir);
        sites.push(cur);
        t += 1;
    };
    WalkTrace { sites, clock, stop: reason }
}

/// Chronological loop erasure.
pub fn loop_erase<T: Copy + Eq + Hash>(path: &[T]) -> Result<Vec<T>> {
    if path.is_empty() {
        return Err(Error::EmptyPath);
    }
    let mut out: Vec<T> = Vec::new();
    let mut pos: FxHashMap<T, usize> = FxHashMap::default();
    for &p in path {
        if let Some(&i) = pos.get(&p) {
            for q in out.drain(i + 1..) {
                pos.remove(&q);
            }
        } else {
            pos.insert(p, out.len());
            out.push(p);
        }
    }
    Ok(out)
}

/// Loop erasure through the last-visit recursion: π₀ = ρ₀,
/// s_i = max{n : ρ_n = π_{i−1}}, π_i = ρ_{s_i + 1}.
pub fn loop_erase_by_last_visits<T: Copy + Eq + Hash>(path: &[T]) -> Result<Vec<T>> {
    if path.is_empty() {
        return Err(Error::EmptyPath);
    }
    let mut last: FxHashMap<T, usize> = FxHashMap::default();
    for (i, &p) in path.iter().enumerate() {
        last.insert(p, i);
    }
    let mut out = vec![path[0]];
    let mut s = last[&path[0]];
    while s + 1 < path.len() {
        let next = path[s + 1];
        out.push(next);
        s = last[&next];
    }
    Ok(out)
}

/// First index at which the path leaves the closed ball of radius `r`.
pub fn exit_time(sites: &[Point], r: f64) -> Option<usize> {
    sites.iter().position(|p| !in_ball(p, r))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CutTime {
    pub k: usize,
    /// S[k, end] avoids the ball of radius m.
    pub avoids_inner: bool,
    /// τ_m ≤ k ≤ τ_n.
    pub in_window: bool,
}

/// All k with S[0, k] ∩ S[k+1, end] = ∅, with annotations relative to the
/// balls of radius `m` and `n`. Exit times missing from the trace are taken
/// as its last index.
pub fn cut_time_scan(sites: &[Point], m: f64, n: f64) -> Result<Vec<CutTime>> {
    if m >= n {
        return Err(Error::InvalidParams(format!("need m < n, got m = {m}, n = {n}")));
    }
    if sites.is_empty() {
        return Err(Error::EmptyPath);
    }
    let end = sites.len() - 1;
    let tau_m = exit_time(sites, m).unwrap_or(end);
    let tau_n = exit_time(sites, n).unwrap_or(end);
    let mut last: FxHashMap<Point, usize> = FxHashMap::default();
    for (i, p) in sites.iter().enumerate() {
        last.insert(*p, i);
    }
    // latest index j ≥ k with S_j in the inner ball
    let mut inner_after = vec![None; sites.len() + 1];
    for k in (0..sites.len()).rev() {
        inner_after[k] = if in_ball(&sites[k], m) { Some(k) } else { inner_after[k + 1] };
    }
    let mut reach = 0;
    let mut out = Vec::new();
    for k in 0..sites.len() {
        reach = reach.max(last[&sites[k]]);
        if reach <= k {
            out.push(CutTime {
                k,
                avoids_inner: inner_after[k].is_none(),
                in_window: (tau_m..=tau_n).contains(&k),
            });
        }
    }
    Ok(out)
}

/// Frequency of walks with a cut time in [τ_m, τ_n] after which the walk
/// never returns to the ball of radius m, for each n.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CutTrend {
    pub d: usize,
    pub m: u32,
    pub ns: Vec<u32>,
    pub hits: Vec<Proportion>,
}

/// Runs `walks` walks from the origin for each n, each truncated at the exit
/// of the ball of radius `truncation · n`.
pub fn cut_time_trend(d: usize, m: u32, ns: &[u32], truncation: u32, walks: u64, seed: u64) -> Result<CutTrend> {
    check_dimension(d)?;
    if ns.iter().any(|&n| n <= m) || truncation < 1 {
        return Err(Error::InvalidParams("need n > m and truncation >= 1".into()));
    }
    let hits = ns
        .iter()
        .enumerate()
        .map(|(i, &n)| -> Result<Proportion> {
            let stop = StopRule { exit_radius: Some((truncation * n) as f64), hit: None };
            let found = map_replicas(walks, |w| -> Result<bool> {
                let mut rng = stream_rng(mix_seed(seed, i as u64), w);
                let trace = run_walk(d, [0; 3], &stop, None, KillMode::Stop, u64::MAX, &mut rng);
                Ok(cut_time_scan(&trace.sites, m as f64, n as f64)?
                    .iter()
                    .any(|c| c.avoids_inner && c.in_window))
            });
            let count = found.into_iter().collect::<Result<Vec<_>>>()?.into_iter().filter(|&b| b).count();
            Ok(Proportion::new(count as u64, walks))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CutTrend { d, m, ns: ns.to_vec(), hits })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixStability {
    Equal,
    Unequal,
    KilledEarly,
}

/// Compares LE(S[0, T]) and LE(S[0, end]) inside the ball of radius `m`,
/// as ordered point lists.
pub fn le_prefix_stability(trace: &WalkTrace, m: f64, n: f64) -> Result<PrefixStability> {
    if m >= n {
        return Err(Error::InvalidParams(format!("need m < n, got m = {m}, n = {n}")));
    }
    let end = trace.sites.len() - 1;
    let t = trace.clock.map_or(end, |t| t.min(end as u64) as usize);
    if exit_time(&trace.sites[..=t], m).is_none() && t < end {
        return Ok(PrefixStability::KilledEarly);
    }
    let inner = |path: Vec<Point>| -> Vec<Point> { path.into_iter().filter(|p| in_ball(p, m)).collect() };
    let killed = inner(loop_erase(&trace.sites[..=t])?);
    let full = inner(loop_erase(&trace.sites)?);
    Ok(if killed == full { PrefixStability::Equal } else { PrefixStability::Unequal })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::stats::chi_square_p_value;
    use proptest::prelude::*;

    #[test]
    fn killing_law_from_gamma() {
        assert_eq!(KillingLaw::from_gamma(2, 1.0).unwrap().lambda(), 0.2);
        assert!(KillingLaw::new(1.0).is_err());
        assert!(KillingLaw::from_gamma(2, -1.0).is_err());
        let mut rng = stream_rng(0, 0);
        assert_eq!(KillingLaw::new(0.0).unwrap().sample(&mut rng), u64::MAX);
    }

    #[test]
    fn geometric_mean_and_law() {
        let law = KillingLaw::new(0.01).unwrap();
        let mut rng = stream_rng(1, 0);
        let n = 100_000;
        let samples: Vec<u64> = (0..n).map(|_| law.sample(&mut rng)).collect();
        let mean = samples.iter().sum::<u64>() as f64 / n as f64;
        let sd = (0.99f64).sqrt() / 0.01;
        assert!((mean - 99.0).abs() < 3.0 * sd / (n as f64).sqrt(), "mean {mean}");

        let law = KillingLaw::new(0.2).unwrap();
        let bins = 20;
        let mut counts = vec![0u64; bins + 1];
        for _ in 0..n {
            let t = law.sample(&mut rng) as usize;
            counts[t.min(bins)] += 1;
        }
        let mut probs: Vec<f64> = (0..bins).map(|t| 0.8f64.powi(t as i32) * 0.2).collect();
        probs.push(0.8f64.powi(bins as i32));
        assert!(chi_square_p_value(&counts, &probs).unwrap() > 0.01);
    }

    #[test]
    fn exit_walk_without_killing() {
        let mut rng = stream_rng(2, 0);
        for _ in 0..100 {
            let stop = StopRule { exit_radius: Some(5.0), hit: None };
            let t = run_walk(3, [0; 3], &stop, None, KillMode::Stop, u64::MAX, &mut rng);
            assert_eq!(t.stop, StopReason::Exit);
            assert_eq!(t.killed_at(), None);
            assert!(!in_ball(&t.last(), 5.0));
            assert!(t.sites[..t.sites.len() - 1].iter().all(|p| in_ball(p, 5.0)));
            for w in t.sites.windows(2) {
                assert!(Direction::between(&w[0], &w[1]).is_some());
            }
        }
    }

    #[test]
    fn hit_kill_and_budget() {
        let mut rng = stream_rng(3, 0);
        let target = PointSet::from_points(2, 3, &[[2, 0, 0], [40, 0, 0]]);
        assert!(target.contains(&[40, 0, 0]) && !target.contains(&[-40, 0, 0]));
        assert_eq!(target.len(), 2);
        let stop = StopRule { exit_radius: None, hit: Some(&target) };
        let t = run_walk(2, [0; 3], &stop, None, KillMode::Stop, u64::MAX, &mut rng);
        assert_eq!(t.stop, StopReason::Hit);
        assert!(target.contains(&t.last()));

        let law = KillingLaw::new(0.5).unwrap();
        let none = StopRule::default();
        let t = run_walk(2, [0; 3], &none, Some(law), KillMode::Stop, u64::MAX, &mut rng);
        assert_eq!(t.stop, StopReason::Killed);
        assert_eq!(t.killed_at(), Some(t.moves()));

        let t = run_walk(2, [0; 3], &none, None, KillMode::Stop, 17, &mut rng);
        assert_eq!((t.stop, t.moves()), (StopReason::Budget, 17));

        let stop = StopRule { exit_radius: Some(3.0), hit: None };
        let t = run_walk(2, [0; 3], &stop, Some(law), KillMode::Record, u64::MAX, &mut rng);
        assert_eq!(t.stop, StopReason::Exit);
        assert!(t.clock.is_some());
    }

    #[test]
    fn loop_erasure_examples() {
        assert_eq!(loop_erase(&['a', 'b', 'a', 'b', 'c']).unwrap(), vec!['a', 'b', 'c']);
        assert_eq!(loop_erase(&[1, 2, 3]).unwrap(), vec![1, 2, 3]);
        assert_eq!(loop_erase(&[1, 2, 1]).unwrap(), vec![1]);
        assert!(matches!(loop_erase::<u8>(&[]), Err(Error::EmptyPath)));
        assert_eq!(loop_erase_by_last_visits(&['a', 'b', 'a', 'b', 'c']).unwrap(), vec!['a', 'b', 'c']);
    }

    #[test]
    fn cut_time_examples() {
        let line: Vec<Point> = (0..10).map(|i| [i, 0, 0]).collect();
        let cuts = cut_time_scan(&line, 2.0, 5.0).unwrap();
        assert_eq!(cuts.len(), 10);
        assert!(cuts[3].avoids_inner && !cuts[2].avoids_inner);
        assert!(cuts[3].in_window && cuts[6].in_window && !cuts[7].in_window);

        let back = vec![[0, 0, 0], [1, 0, 0], [0, 0, 0]];
        assert!(cut_time_scan(&back, 1.0, 2.0).unwrap().iter().all(|c| c.k != 0));
        assert!(cut_time_scan(&back, 2.0, 1.0).is_err());
    }

    #[test]
    fn prefix_stability_examples() {
        // leaves radius 1 at step 2, killed at 3, then loops back over (1,0)
        let sites = vec![[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0], [3, 1, 0], [2, 1, 0], [1, 1, 0], [1, 0, 0], [0, 0, 0]];
        let trace = WalkTrace { sites: sites.clone(), clock: Some(3), stop: StopReason::Budget };
        assert_eq!(le_prefix_stability(&trace, 1.0, 4.0).unwrap(), PrefixStability::Unequal);
        let trace = WalkTrace { sites: sites.clone(), clock: Some(100), stop: StopReason::Budget };
        assert_eq!(le_prefix_stability(&trace, 1.0, 4.0).unwrap(), PrefixStability::Equal);
        let trace = WalkTrace { sites, clock: Some(1), stop: StopReason::Budget };
        assert_eq!(le_prefix_stability(&trace, 1.0, 4.0).unwrap(), PrefixStability::KilledEarly);
    }

    fn walk_strategy() -> impl Strategy<Value = Vec<Point>> {
        (any::<u64>(), 1usize..400).prop_map(|(seed, len)| {
            let mut rng = stream_rng(seed, 0);
            let t = run_walk(3, [0; 3], &StopRule::default(), None, KillMode::Stop, len as u64, &mut rng);
            t.sites
        })
    }

    proptest! {
        #[test]
        fn loop_erasure_properties(path in walk_strategy()) {
            let le = loop_erase(&path).unwrap();
            prop_assert_eq!(&le, &loop_erase_by_last_visits(&path).unwrap());
            prop_assert_eq!(le.first(), path.first());
            prop_assert_eq!(le.last(), path.last());
            let distinct: FxHashSet<Point> = le.iter().copied().collect();
            prop_assert_eq!(distinct.len(), le.len());
            prop_assert_eq!(loop_erase(&le).unwrap(), le);
        }

        #[test]
        fn cut_time_splice(path in walk_strategy()) {
            let le = loop_erase(&path).unwrap();
            for cut in cut_time_scan(&path, 1.0, 3.0).unwrap() {
                let k = cut.k;
                let mut joined = loop_erase(&path[..=k]).unwrap();
                if k + 1 < path.len() {
                    joined.extend(loop_erase(&path[k + 1..]).unwrap());
                }
                prop_assert_eq!(&joined, &le);
                let head: FxHashSet<Point> = path[..=k].iter().copied().collect();
                prop_assert!(path[k + 1..].iter().all(|p| !head.contains(p)));
            }
        }
    }
}
