//! Brute-force ground truth on tiny domains.

use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_traits::{One, Zero};
use rustc_hash::FxHashMap;
use serde::Serialize;

use crate::bijection::{phi, sigma, SpanningTree, StarConfig};
use crate::burning::burning_test;
use crate::error::{Error, Result};
use crate::lattice::{build_wired_graph, BoxDomain, DissipativeGraph, Direction, EdgeSlot, Node, Point, Shape};
use crate::rng::stream_rng;
use crate::sandpile::{fsc_scan, DiscreteConfig, FscMode, TopplingParams};
use crate::stats::{chi_square_p_value, frequencies, tv_distance};
use crate::wilson::{coupled_wilson_pair, wilson_sample};

pub const ENUMERATION_SITE_LIMIT: usize = 9;
pub const TREE_ASSIGNMENT_LIMIT: u128 = 50_000_000;
pub const STATIONARY_STATE_LIMIT: u128 = 100_000;

/// The two-site domain {0, e₁} in d = 2.
pub fn two_site_domain() -> BoxDomain {
    BoxDomain::from_points(2, &[[0, 0, 0], [1, 0, 0]]).expect("valid domain")
}

/// The 2×2 box {0, 1}² in d = 2.
pub fn square_domain() -> BoxDomain {
    let pts: Vec<Point> = vec![[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]];
    BoxDomain::from_points(2, &pts).expect("valid domain")
}

#[derive(Clone, Debug, Default)]
pub struct ExactEnumeration {
    pub allowed: Vec<StarConfig>,
    /// Trees with their number of dissipative edges.
    pub trees: Vec<(SpanningTree, usize)>,
}

impl ExactEnumeration {
    /// Z(γ) = Σ_t γ^H(t).
    pub fn weight(&self, gamma: f64) -> f64 {
        self.trees.iter().map(|(_, h)| gamma.powi(*h as i32)).sum()
    }

    /// Number of trees with each value of H.
    pub fn h_histogram(&self) -> Vec<usize> {
        let top = self.trees.iter().map(|t| t.1).max().unwrap_or(0);
        let mut out = vec![0; top + 1];
        for (_, h) in &self.trees {
            out[*h] += 1;
        }
        out
    }
}

fn for_each_config(n: usize, base: u8, mut f: impl FnMut(&[u8]) -> Result<()>) -> Result<()> {
    let mut xi = vec![0u8; n];
    loop {
        f(&xi)?;
        let mut i = 0;
        loop {
            if i == n {
                return Ok(());
            }
            xi[i] += 1;
            if xi[i] < base {
                break;
            }
            xi[i] = 0;
            i += 1;
        }
    }
}

/// All allowed configurations, discrete (heights < 2d) or starred
/// (heights ≤ 2d), in lexicographic order of the last site first. Burning
/// and the exhaustive FSC scan must agree on each of them.
pub fn enumerate_allowed(domain: &BoxDomain, starred: bool) -> Result<ExactEnumeration> {
    let n = domain.len();
    if n > ENUMERATION_SITE_LIMIT {
        return Err(Error::TooLarge { what: "allowed-config enumeration (sites)", needed: n as u128, limit: ENUMERATION_SITE_LIMIT as u128 });
    }
    let d = domain.dim();
    let base = 2 * d as u8 + starred as u8;
    let mut allowed = Vec::new();
    for_each_config(n, base, |xi| {
        let burns = burning_test(domain, xi)?.is_allowed();
        let heights: Vec<u32> = xi.iter().map(|&h| h as u32).collect();
        let scan = fsc_scan(domain, &heights, FscMode::Exhaustive)?.is_none();
        if burns != scan {
            return Err(Error::InconsistentPaths(format!("burning and FSC scan disagree on {xi:?}")));
        }
        if burns {
            allowed.push(StarConfig::new(d, xi.to_vec())?);
        }
        Ok(())
    })?;
    Ok(ExactEnumeration { allowed, trees: Vec::new() })
}

/// The Λ×Λ matrix with 2d + γ on the diagonal and −1 between neighbours.
fn laplacian(domain: &BoxDomain) -> Vec<Vec<i64>> {
    let n = domain.len();
    let d = domain.dim();
    let mut m = vec![vec![0i64; n]; n];
    for x in 0..n as u32 {
        m[x as usize][x as usize] = 2 * d as i64;
        for dir in Direction::all(d) {
            if let Some(y) = domain.neighbor(x, dir) {
                m[x as usize][y as usize] -= 1;
            }
        }
    }
    m
}

/// Exact determinant by fraction-free Gaussian elimination.
pub fn bareiss_determinant(mut a: Vec<Vec<BigInt>>) -> BigInt {
    let n = a.len();
    let mut sign = BigInt::one();
    let mut prev = BigInt::one();
    for k in 0..n {
        if a[k][k].is_zero() {
            match (k + 1..n).find(|&r| !a[r][k].is_zero()) {
                Some(r) => {
                    a.swap(k, r);
                    sign = -sign;
                }
                None => return BigInt::zero(),
            }
        }
        for i in k + 1..n {
            for j in k + 1..n {
                let v = &a[i][j] * &a[k][k] - &a[i][k] * &a[k][j];
                a[i][j] = v / &prev;
            }
        }
        prev = a[k][k].clone();
    }
    if n == 0 {
        return BigInt::one();
    }
    sign * &a[n - 1][n - 1]
}

/// Exact number of spanning trees of the wired graph without dissipation.
pub fn count_trees_exact(domain: &BoxDomain) -> BigInt {
    let a = laplacian(domain).into_iter().map(|row| row.into_iter().map(BigInt::from).collect()).collect();
    bareiss_determinant(a)
}

/// Z(γ) = det Δ^(γ)_Λ.
pub fn count_trees_determinant(domain: &BoxDomain, gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParams(format!("gamma = {gamma}")));
    }
    if domain.len() > 10_000 {
        return Err(Error::TooLarge { what: "dense determinant (sites)", needed: domain.len() as u128, limit: 10_000 });
    }
    if gamma == 0.0 {
        let exact = count_trees_exact(domain);
        return Ok(exact.to_string().parse().expect("integer literal"));
    }
    let n = domain.len();
    let lap = laplacian(domain);
    let m = DMatrix::from_fn(n, n, |i, j| lap[i][j] as f64 + if i == j { gamma } else { 0.0 });
    Ok(m.determinant())
}

/// All spanning trees of the wired graph (with dissipative slots when
/// `gamma > 0`), by parent-slot assignment with cycle rejection.
pub fn enumerate_trees(domain: &BoxDomain, gamma: f64) -> Result<ExactEnumeration> {
    let graph = build_wired_graph(domain.clone(), gamma > 0.0);
    let n = domain.len();
    let slots: Vec<EdgeSlot> = graph.slots(0).collect();
    let needed = (slots.len() as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if needed > TREE_ASSIGNMENT_LIMIT {
        return Err(Error::TooLarge { what: "tree enumeration", needed, limit: TREE_ASSIGNMENT_LIMIT });
    }
    let mut parent = vec![EdgeSlot::Diss; n];
    let mut trees = Vec::new();
    assign(&graph, &slots, 0, &mut parent, &mut trees);
    Ok(ExactEnumeration { allowed: Vec::new(), trees })
}

fn assign(
    graph: &DissipativeGraph,
    slots: &[EdgeSlot],
    x: usize,
    parent: &mut Vec<EdgeSlot>,
    out: &mut Vec<(SpanningTree, usize)>,
) {
    if x == parent.len() {
        let tree = SpanningTree { parent: parent.clone() };
        let h = tree.h();
        out.push((tree, h));
        return;
    }
    for &slot in slots {
        parent[x] = slot;
        if !closes_cycle(graph, parent, x) {
            assign(graph, slots, x + 1, parent, out);
        }
    }
}

/// Whether following parents from `x` through sites `≤ x` returns to `x`.
fn closes_cycle(graph: &DissipativeGraph, parent: &[EdgeSlot], x: usize) -> bool {
    let mut cur = x as u32;
    for _ in 0..=x {
        match graph.target(cur, parent[cur as usize]) {
            Node::Root => return false,
            Node::Site(y) if y as usize == x => return true,
            Node::Site(y) if y as usize > x => return false,
            Node::Site(y) => cur = y,
        }
    }
    true
}

/// Exact stationary law of the discrete chain with uniform addition,
/// as a map from stable configurations (index Σ η_i (2d)^i) to mass.
pub fn exact_stationary(domain: &BoxDomain, params: &TopplingParams) -> Result<Vec<f64>> {
    if params.gamma != 0.0 || params.mode != crate::sandpile::Mode::Discrete {
        return Err(Error::InvalidParams("exact_stationary needs the discrete chain".into()));
    }
    let n = domain.len();
    let base = 2 * domain.dim() as u64;
    let states = (base as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if states > STATIONARY_STATE_LIMIT {
        return Err(Error::TooLarge { what: "stationary state space", needed: states, limit: STATIONARY_STATE_LIMIT });
    }
    let states = states as usize;
    let encode = |h: &[u32]| h.iter().rev().fold(0u64, |acc, &v| acc * base + v as u64) as usize;
    let mut next = vec![0usize; states * n];
    let mut heights = vec![0u32; n];
    for s in 0..states {
        let mut v = s as u64;
        for h in heights.iter_mut() {
            *h = (v % base) as u32;
            v /= base;
        }
        let cfg = DiscreteConfig::new(heights.clone());
        for x in 0..n {
            let mut bumped = cfg.clone();
            bumped.heights[x] += 1;
            next[s * n + x] = encode(&bumped.stabilize(domain, params).0.heights);
        }
    }
    // lazy chain (P + I)/2 has the same stationary law and is aperiodic
    let mut pi = vec![1.0 / states as f64; states];
    let mut step = vec![0.0; states];
    for _ in 0..1_000_000 {
        step.iter_mut().zip(&pi).for_each(|(a, &b)| *a = 0.5 * b);
        for s in 0..states {
            let share = 0.5 * pi[s] / n as f64;
            for x in 0..n {
                step[next[s * n + x]] += share;
            }
        }
        let residual: f64 = step.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut pi, &mut step);
        if residual < 1e-13 {
            return Ok(pi);
        }
    }
    Err(Error::Config("power iteration did not converge".into()))
}

/// One line of the oracle table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &str, pass: bool, detail: String) -> OracleCheck {
    OracleCheck { name: name.into(), pass, detail }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Quick,
    Full,
}

fn counting(name: &str, domain: &BoxDomain, expected: Option<u64>) -> Result<OracleCheck> {
    let allowed = enumerate_allowed(domain, false)?.allowed.len() as u64;
    let det = count_trees_exact(domain);
    let trees = enumerate_trees(domain, 0.0)?.trees.len() as u64;
    let target = expected.map_or_else(|| det.clone(), BigInt::from);
    Ok(check(
        name,
        BigInt::from(allowed) == target && det == target && BigInt::from(trees) == target,
        format!("allowed {allowed}, det {det}, trees {trees}"),
    ))
}

/// φ∘σ = id on allowed configurations and σ∘φ = id on trees, with H kept.
pub fn round_trips(domain: &BoxDomain, starred: bool) -> Result<(usize, usize, bool)> {
    let graph = build_wired_graph(domain.clone(), starred);
    let allowed = enumerate_allowed(domain, starred)?.allowed;
    let trees = enumerate_trees(domain, if starred { 1.0 } else { 0.0 })?.trees;
    let mut ok = allowed.len() == trees.len();
    for xi in &allowed {
        let t = sigma(&graph, xi)?;
        ok &= t.h() == xi.h() && phi(&graph, &t)? == *xi;
    }
    for (t, h) in &trees {
        let xi = phi(&graph, t)?;
        ok &= xi.h() == *h && sigma(&graph, &xi)? == *t;
    }
    Ok((allowed.len(), trees.len(), ok))
}

/// Burning and the exhaustive FSC scan on every starred configuration.
pub fn burning_matches_fsc(domain: &BoxDomain) -> Result<(usize, usize)> {
    let base = 2 * domain.dim() as u8 + 1;
    let (mut total, mut agree) = (0, 0);
    for_each_config(domain.len(), base, |xi| {
        let schedule = burning_test(domain, xi)?;
        let heights: Vec<u32> = xi.iter().map(|&h| h as u32).collect();
        let scan = fsc_scan(domain, &heights, FscMode::Exhaustive)?;
        total += 1;
        let leftover_forbidden = schedule.leftover.is_empty() || crate::sandpile::is_forbidden(domain, &heights, &schedule.leftover);
        agree += (schedule.is_allowed() == scan.is_none() && leftover_forbidden) as usize;
        Ok(())
    })?;
    Ok((total, agree))
}

/// Max deviation of the stationary law from uniform on the allowed set, and
/// the mass outside it.
pub fn stationary_deviation(domain: &BoxDomain) -> Result<(usize, f64, f64)> {
    let params = TopplingParams::discrete(domain.dim());
    let pi = exact_stationary(domain, &params)?;
    let allowed = enumerate_allowed(domain, false)?.allowed;
    let base = 2 * domain.dim() as u64;
    let mut in_support = vec![false; pi.len()];
    for xi in &allowed {
        let idx = xi.heights().iter().rev().fold(0u64, |acc, &v| acc * base + v as u64);
        in_support[idx as usize] = true;
    }
    let u = 1.0 / allowed.len() as f64;
    let mut dev: f64 = 0.0;
    let mut outside = 0.0;
    for (s, &p) in pi.iter().enumerate() {
        if in_support[s] {
            dev = dev.max((p - u).abs());
        } else {
            outside += p;
        }
    }
    Ok((allowed.len(), dev, outside))
}

/// TV distance between the visit frequencies of `steps` chain steps on the
/// domain and the uniform law on its allowed configurations.
pub fn chain_tv(domain: &BoxDomain, steps: u64, seed: u64) -> Result<f64> {
    let params = TopplingParams::discrete(domain.dim());
    let allowed = enumerate_allowed(domain, false)?.allowed;
    let index: FxHashMap<Vec<u32>, usize> = allowed
        .iter()
        .enumerate()
        .map(|(i, xi)| (xi.heights().iter().map(|&h| h as u32).collect(), i))
        .collect();
    let mut rng = stream_rng(seed, 0);
    let top = 2 * domain.dim() as u32 - 1;
    let mut cfg = DiscreteConfig::new(vec![top; domain.len()]);
    let mut counts = vec![0u64; allowed.len()];
    for _ in 0..steps {
        cfg = cfg.chain_step(domain, None, &params, &mut rng)?;
        let i = *index
            .get(&cfg.heights)
            .ok_or_else(|| Error::InvalidParams(format!("chain left the allowed set at {:?}", cfg.heights)))?;
        counts[i] += 1;
    }
    let uniform = vec![1.0 / allowed.len() as f64; allowed.len()];
    Ok(tv_distance(&frequencies(&counts), &uniform))
}

/// Chi-square p-value of `samples` Wilson trees against exact weights.
/// With `coupled`, returns the p-values of both sides of the coupled sampler
/// and whether they coincide at γ = 0.
pub fn wilson_law_pvalue(domain: &BoxDomain, gamma: f64, samples: u64, seed: u64, coupled: bool) -> Result<Vec<f64>> {
    let exact = enumerate_trees(domain, gamma)?;
    let z = exact.weight(gamma);
    let probs: Vec<f64> = exact.trees.iter().map(|(_, h)| gamma.powi(*h as i32) / z).collect();
    let index: FxHashMap<&SpanningTree, usize> = exact.trees.iter().enumerate().map(|(i, (t, _))| (t, i)).collect();
    let graph = build_wired_graph(domain.clone(), gamma > 0.0);
    let order: Vec<u32> = (0..domain.len() as u32).collect();
    let mut rng = stream_rng(seed, 0);
    let lookup = |t: &SpanningTree| index.get(t).copied().ok_or_else(|| Error::NotATree("unknown tree".into()));
    if !coupled {
        let mut counts = vec![0u64; probs.len()];
        for _ in 0..samples {
            counts[lookup(&wilson_sample(&graph, gamma, &order, &mut rng)?)?] += 1;
        }
        return Ok(vec![chi_square_p_value(&counts, &probs)?]);
    }
    let graph = build_wired_graph(domain.clone(), true);
    let exact0 = enumerate_trees(domain, 0.0)?;
    let probs0 = vec![1.0 / exact0.trees.len() as f64; exact0.trees.len()];
    let index0: FxHashMap<&SpanningTree, usize> = exact0.trees.iter().enumerate().map(|(i, (t, _))| (t, i)).collect();
    let mut c0 = vec![0u64; probs0.len()];
    let mut cg = vec![0u64; probs.len()];
    let mut identical = true;
    for _ in 0..samples {
        let pair = coupled_wilson_pair(&graph, gamma, &order, &mut rng)?;
        c0[index0.get(&pair.tree0).copied().ok_or_else(|| Error::NotATree("unknown tree".into()))?] += 1;
        cg[lookup(&pair.tree_gamma)?] += 1;
        identical &= pair.tree0 == pair.tree_gamma;
    }
    let p0 = chi_square_p_value(&c0, &probs0)?;
    let pg = chi_square_p_value(&cg, &probs)?;
    Ok(vec![p0, pg, if identical { 1.0 } else { 0.0 }])
}

/// The pass/fail table of the `oracle` subcommand.
pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<OracleCheck>> {
    let two = two_site_domain();
    let single = BoxDomain::build(2, 0, Shape::Cube)?;
    let mut out = vec![counting("count_two_site", &two, Some(15))?];

    let z = count_trees_determinant(&two, 0.5)?;
    let w = enumerate_trees(&two, 0.5)?.weight(0.5);
    let formula = 4.5f64 * 4.5 - 1.0;
    out.push(check(
        "weighted_two_site",
        (z - formula).abs() < 1e-9 && (w - formula).abs() < 1e-9,
        format!("det {z}, enumeration {w}, (4+g)^2-1 = {formula}"),
    ));
    let h = enumerate_trees(&two, 0.5)?.h_histogram();
    out.push(check("two_site_h2", h.get(2) == Some(&1), format!("H histogram {h:?}")));
    let (a, t, ok) = round_trips(&two, true)?;
    out.push(check("bijection_two_site_starred", ok, format!("{a} configs, {t} trees")));
    let (support, dev, outside) = stationary_deviation(&two)?;
    out.push(check(
        "stationary_two_site",
        support == 15 && dev <= 1e-10 && outside <= 1e-10,
        format!("support {support}, max deviation {dev:e}, outside mass {outside:e}"),
    ));
    let singles = enumerate_allowed(&single, true)?.allowed.len();
    out.push(check("single_site_starred", singles == 5, format!("{singles} allowed")));
    let trees = enumerate_trees(&single, 0.5)?.trees.len();
    out.push(check("single_site_trees", trees == 5, format!("{trees} trees")));
    let (support, dev, outside) = stationary_deviation(&single)?;
    out.push(check(
        "stationary_single_site",
        support == 4 && dev <= 1e-10 && outside <= 1e-10,
        format!("support {support}, max deviation {dev:e}"),
    ));

    if suite == Suite::Full {
        let square = square_domain();
        out.push(counting("count_square", &square, Some(192))?);
        let rect = BoxDomain::from_points(2, &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0], [1, 1, 0], [2, 1, 0]])?;
        out.push(counting("count_rectangle_2x3", &rect, None)?);
        for (name, starred) in [("bijection_square", false), ("bijection_square_starred", true)] {
            let (a, t, ok) = round_trips(&square, starred)?;
            out.push(check(name, ok, format!("{a} configs, {t} trees")));
        }
        let (total, agree) = burning_matches_fsc(&square)?;
        out.push(check("burning_vs_fsc_square", total == 625 && agree == total, format!("{agree}/{total} agree")));
        let tv = chain_tv(&square, 1_000_000, seed)?;
        out.push(check("chain_square", tv < 0.02, format!("TV {tv:.5}")));
        for gamma in [0.0, 0.5] {
            let p = wilson_law_pvalue(&two, gamma, 100_000, seed ^ 0x51, false)?[0];
            out.push(check(&format!("wilson_two_site_g{gamma}"), p > 0.01, format!("p = {p:.4}")));
        }
        let p = wilson_law_pvalue(&two, 0.5, 100_000, seed ^ 0x52, true)?;
        out.push(check(
            "coupled_wilson_two_site",
            p[0] > 0.01 && p[1] > 0.01,
            format!("p0 = {:.4}, pg = {:.4}", p[0], p[1]),
        ));
    }
    Ok(out)
}
