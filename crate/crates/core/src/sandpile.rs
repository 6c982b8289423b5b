//! Height configurations, legal topplings for the critical and dissipative
//! toppling matrices, stabilization and the sandpile Markov chain.

use std::collections::VecDeque;
use std::fmt::Debug;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::burning::burning_test;
use crate::error::{Error, Result};
use crate::lattice::{check_dimension, BoxDomain, Direction, Point, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Discrete,
    Continuous,
}

/// Toppling rule: a site topples once its height reaches `2d + gamma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopplingParams {
    pub d: usize,
    pub gamma: f64,
    pub mode: Mode,
}

impl TopplingParams {
    pub fn discrete(d: usize) -> Self {
        TopplingParams { d, gamma: 0.0, mode: Mode::Discrete }
    }

    pub fn continuous(d: usize, gamma: f64) -> Result<Self> {
        let p = TopplingParams { d, gamma, mode: Mode::Continuous };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_dimension(self.d)?;
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParams(format!("gamma = {} must be finite and >= 0", self.gamma)));
        }
        if self.mode == Mode::Discrete && self.gamma != 0.0 {
            return Err(Error::InvalidParams("discrete mode requires gamma = 0".into()));
        }
        Ok(())
    }

    pub fn threshold(&self) -> f64 {
        2.0 * self.d as f64 + self.gamma
    }
}

/// A height value: integers for the critical model, reals for the
/// dissipative one.
pub trait Height: Copy + PartialOrd + Debug + Send + Sync {
    fn threshold(params: &TopplingParams) -> Self;
    fn zero() -> Self;
    fn one() -> Self;
    fn add(self, other: Self) -> Self;
    fn sub(self, other: Self) -> Self;
    fn to_f64(self) -> f64;
    fn is_valid(self) -> bool;
}

impl Height for u32 {
    fn threshold(params: &TopplingParams) -> Self {
        2 * params.d as u32
    }
    fn zero() -> Self {
        0
    }
    fn one() -> Self {
        1
    }
    fn add(self, other: Self) -> Self {
        self + other
    }
    fn sub(self, other: Self) -> Self {
        self - other
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_valid(self) -> bool {
        true
    }
}

impl Height for f64 {
    fn threshold(params: &TopplingParams) -> Self {
        params.threshold()
    }
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn add(self, other: Self) -> Self {
        self + other
    }
    fn sub(self, other: Self) -> Self {
        self - other
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_valid(self) -> bool {
        self.is_finite() && self >= 0.0
    }
}

/// A height field on the sites of a domain, in index-map order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config<H> {
    pub heights: Vec<H>,
}

pub type DiscreteConfig = Config<u32>;
pub type ContinuousConfig = Config<f64>;

/// Number of topplings performed at each site during a stabilization.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Odometer(pub Vec<u64>);

impl<H: Height> Config<H> {
    pub fn new(heights: Vec<H>) -> Self {
        Config { heights }
    }

    pub fn len(&self) -> usize {
        self.heights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heights.is_empty()
    }

    pub fn check(&self, domain: &BoxDomain) -> Result<()> {
        if self.heights.len() != domain.len() {
            return Err(Error::LengthMismatch { expected: domain.len(), got: self.heights.len() });
        }
        for (site, h) in self.heights.iter().enumerate() {
            if !h.is_valid() {
                return Err(Error::HeightOutOfRange { site, height: h.to_f64() });
            }
        }
        Ok(())
    }

    pub fn is_stable(&self, params: &TopplingParams) -> bool {
        let t = H::threshold(params);
        self.heights.iter().all(|&h| h < t)
    }

    /// Topples site `x`: its height drops by `2d + gamma` and every lattice
    /// neighbour inside the domain gains one unit.
    pub fn topple(&mut self, domain: &BoxDomain, x: u32, params: &TopplingParams) -> Result<()> {
        let t = H::threshold(params);
        let h = *self
            .heights
            .get(x as usize)
            .ok_or(Error::InvalidParams(format!("site index {x} out of range")))?;
        if h < t {
            return Err(Error::IllegalToppling {
                site: x as usize,
                height: h.to_f64(),
                threshold: t.to_f64(),
            });
        }
        self.topple_unchecked(domain, x, t);
        Ok(())
    }

    /// Topples the site at lattice point `p`.
    pub fn topple_at(&mut self, domain: &BoxDomain, p: &Point, params: &TopplingParams) -> Result<()> {
        let x = domain.index_of(p).ok_or(Error::OutsideDomain(*p))?;
        self.topple(domain, x, params)
    }

    #[inline]
    fn topple_unchecked(&mut self, domain: &BoxDomain, x: u32, t: H) {
        self.heights[x as usize] = self.heights[x as usize].sub(t);
        for dir in Direction::all(domain.dim()) {
            if let Some(y) = domain.neighbor(x, dir) {
                let h = &mut self.heights[y as usize];
                *h = h.add(H::one());
            }
        }
    }

    /// Stabilizes by toppling unstable sites in FIFO order.
    pub fn stabilize(&self, domain: &BoxDomain, params: &TopplingParams) -> (Self, Odometer) {
        let t = H::threshold(params);
        let mut out = self.clone();
        let mut odo = vec![0u64; self.len()];
        let mut queued = vec![false; self.len()];
        let mut queue: VecDeque<u32> = VecDeque::new();
        for (i, &h) in out.heights.iter().enumerate() {
            if h >= t {
                queue.push_back(i as u32);
                queued[i] = true;
            }
        }
        while let Some(x) = queue.pop_front() {
            queued[x as usize] = false;
            if out.heights[x as usize] < t {
                continue;
            }
            out.topple_unchecked(domain, x, t);
            odo[x as usize] += 1;
            if out.heights[x as usize] >= t {
                queue.push_back(x);
                queued[x as usize] = true;
            }
            for dir in Direction::all(domain.dim()) {
                if let Some(y) = domain.neighbor(x, dir) {
                    if !queued[y as usize] && out.heights[y as usize] >= t {
                        queue.push_back(y);
                        queued[y as usize] = true;
                    }
                }
            }
        }
        (out, Odometer(odo))
    }

    /// Stabilizes by toppling a uniformly chosen unstable site at each step.
    pub fn stabilize_random_order<R: Rng + ?Sized>(
        &self,
        domain: &BoxDomain,
        params: &TopplingParams,
        rng: &mut R,
    ) -> (Self, Odometer) {
        let t = H::threshold(params);
        let mut out = self.clone();
        let mut odo = vec![0u64; self.len()];
        let mut active: Vec<u32> = Vec::new();
        let mut pos = vec![usize::MAX; self.len()];
        let refresh = |x: u32, out: &Self, active: &mut Vec<u32>, pos: &mut Vec<usize>| {
            let unstable = out.heights[x as usize] >= t;
            let present = pos[x as usize] != usize::MAX;
            if unstable && !present {
                pos[x as usize] = active.len();
                active.push(x);
            } else if !unstable && present {
                let i = pos[x as usize];
                let last = *active.last().unwrap();
                active.swap_remove(i);
                if last != x {
                    pos[last as usize] = i;
                }
                pos[x as usize] = usize::MAX;
            }
        };
        for x in 0..self.len() as u32 {
            refresh(x, &out, &mut active, &mut pos);
        }
        while !active.is_empty() {
            let x = active[rng.random_range(0..active.len())];
            out.topple_unchecked(domain, x, t);
            odo[x as usize] += 1;
            refresh(x, &out, &mut active, &mut pos);
            for dir in Direction::all(domain.dim()) {
                if let Some(y) = domain.neighbor(x, dir) {
                    refresh(y, &out, &mut active, &mut pos);
                }
            }
        }
        (out, Odometer(odo))
    }

    /// One step of the sandpile chain: add a unit at `site` (uniform if
    /// `None`) and stabilize.
    pub fn chain_step<R: Rng + ?Sized>(
        &self,
        domain: &BoxDomain,
        site: Option<u32>,
        params: &TopplingParams,
        rng: &mut R,
    ) -> Result<Self> {
        if !self.is_stable(params) {
            return Err(Error::Unstable);
        }
        let x = site.unwrap_or_else(|| rng.random_range(0..domain.len() as u32));
        let mut next = self.clone();
        next.heights[x as usize] = next.heights[x as usize].add(H::one());
        Ok(next.stabilize(domain, params).0)
    }

    /// Heights rounded down, as used by the forbidden-subconfiguration test.
    pub fn integer_heights(&self) -> Vec<u32> {
        self.heights.iter().map(|h| h.to_f64().floor() as u32).collect()
    }
}

/// Checks `η_final = η_init − Δ^(γ) u` site by site and returns the largest
/// absolute deviation.
pub fn odometer_residual<H: Height>(
    domain: &BoxDomain,
    params: &TopplingParams,
    init: &Config<H>,
    fin: &Config<H>,
    odo: &Odometer,
) -> f64 {
    let t = params.threshold();
    let mut worst: f64 = 0.0;
    for x in 0..domain.len() as u32 {
        let mut expect = init.heights[x as usize].to_f64() - t * odo.0[x as usize] as f64;
        for dir in Direction::all(domain.dim()) {
            if let Some(y) = domain.neighbor(x, dir) {
                expect += odo.0[y as usize] as f64;
            }
        }
        worst = worst.max((expect - fin.heights[x as usize].to_f64()).abs());
    }
    worst
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FscMode {
    /// Scan all subsets by increasing size (only for at most 20 sites).
    Exhaustive,
    /// Use the leftover set of the burning test.
    Burning,
}

pub const FSC_EXHAUSTIVE_LIMIT: usize = 20;

/// `W` is forbidden when every `y ∈ W` has height below its number of
/// lattice neighbours in `W`.
pub fn is_forbidden(domain: &BoxDomain, heights: &[u32], w: &[u32]) -> bool {
    if w.is_empty() {
        return false;
    }
    let mut member = vec![false; domain.len()];
    for &y in w {
        member[y as usize] = true;
    }
    w.iter().all(|&y| {
        let inside = Direction::all(domain.dim())
            .filter_map(|dir| domain.neighbor(y, dir))
            .filter(|&z| member[z as usize])
            .count() as u32;
        heights[y as usize] < inside
    })
}

/// Looks for a forbidden subconfiguration. The exhaustive mode returns one
/// of minimum cardinality; the burning mode returns the unburnt leftover.
pub fn fsc_scan(domain: &BoxDomain, heights: &[u32], mode: FscMode) -> Result<Option<Vec<u32>>> {
    if heights.len() != domain.len() {
        return Err(Error::LengthMismatch { expected: domain.len(), got: heights.len() });
    }
    match mode {
        FscMode::Exhaustive => fsc_exhaustive(domain, heights),
        FscMode::Burning => {
            let cap = 2 * domain.dim() as u32;
            let xi: Vec<u8> = heights.iter().map(|&h| h.min(cap) as u8).collect();
            let schedule = burning_test(domain, &xi)?;
            Ok((!schedule.leftover.is_empty()).then_some(schedule.leftover))
        }
    }
}

fn fsc_exhaustive(domain: &BoxDomain, heights: &[u32]) -> Result<Option<Vec<u32>>> {
    let n = domain.len();
    if n > FSC_EXHAUSTIVE_LIMIT {
        return Err(Error::TooLarge {
            what: "exhaustive FSC scan",
            needed: 1u128 << n,
            limit: 1u128 << FSC_EXHAUSTIVE_LIMIT,
        });
    }
    let nbr: Vec<u32> = (0..n as u32)
        .map(|x| {
            Direction::all(domain.dim())
                .filter_map(|dir| domain.neighbor(x, dir))
                .fold(0u32, |m, y| m | (1 << y))
        })
        .collect();
    let forbidden = |mask: u32| {
        let mut rest = mask;
        while rest != 0 {
            let y = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            if heights[y] >= (nbr[y] & mask).count_ones() {
                return false;
            }
        }
        true
    };
    for size in 1..=n as u32 {
        // Gosper's hack over all masks with `size` bits set
        let mut mask: u64 = (1u64 << size) - 1;
        while mask < (1u64 << n) {
            if forbidden(mask as u32) {
                let w = (0..n as u32).filter(|&i| mask & (1 << i) != 0).collect();
                return Ok(Some(w));
            }
            let c = mask & mask.wrapping_neg();
            let r = mask + c;
            mask = (((r ^ mask) >> 2) / c) | r;
        }
    }
    Ok(None)
}

/// On-disk configuration: `{"d":2,"gamma":0.5,"shape":"cube","k":1,"heights":[...]}`
/// with heights in index-map order. Custom shapes list their `sites`
/// (and ignore `k`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub d: usize,
    pub gamma: f64,
    pub shape: Shape,
    pub k: u32,
    pub heights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<Vec<Vec<i32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub odometer: Option<Vec<u64>>,
}

/// A configuration read from disk, typed by toppling mode.
#[derive(Clone, Debug)]
pub enum AnyConfig {
    Discrete(DiscreteConfig),
    Continuous(ContinuousConfig),
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn domain(&self) -> Result<BoxDomain> {
        match (self.shape, &self.sites) {
            (Shape::Custom, Some(sites)) => {
                let pts = sites
                    .iter()
                    .map(|s| {
                        if s.len() != self.d {
                            return Err(Error::Config(format!("site {s:?} needs {} coordinates", self.d)));
                        }
                        let mut p = [0; 3];
                        p[..self.d].copy_from_slice(s);
                        Ok(p)
                    })
                    .collect::<Result<Vec<_>>>()?;
                BoxDomain::from_points(self.d, &pts)
            }
            (Shape::Custom, None) => Err(Error::Config("custom shape needs a sites list".into())),
            (_, Some(_)) => Err(Error::Config("sites are only used with the custom shape".into())),
            (shape, None) => BoxDomain::build(self.d, self.k, shape),
        }
    }

    /// Integer heights with `gamma = 0` are treated as the critical model;
    /// everything else as the continuous one.
    pub fn typed(&self) -> Result<(BoxDomain, TopplingParams, AnyConfig)> {
        let domain = self.domain()?;
        let integral = self.heights.iter().all(|h| h.fract() == 0.0 && *h >= 0.0 && *h < u32::MAX as f64);
        let (params, cfg) = if self.gamma == 0.0 && integral {
            let heights = self.heights.iter().map(|&h| h as u32).collect();
            (TopplingParams::discrete(self.d), AnyConfig::Discrete(Config::new(heights)))
        } else {
            (
                TopplingParams::continuous(self.d, self.gamma)?,
                AnyConfig::Continuous(Config::new(self.heights.clone())),
            )
        };
        match &cfg {
            AnyConfig::Discrete(c) => c.check(&domain)?,
            AnyConfig::Continuous(c) => c.check(&domain)?,
        }
        Ok((domain, params, cfg))
    }

    pub fn with_result<H: Height>(&self, cfg: &Config<H>, odo: &Odometer) -> ConfigFile {
        ConfigFile {
            heights: cfg.heights.iter().map(|h| h.to_f64()).collect(),
            odometer: Some(odo.0.clone()),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn square() -> BoxDomain {
        BoxDomain::from_points(2, &[[0, 0, 0], [0, 1, 0], [1, 0, 0], [1, 1, 0]]).unwrap()
    }

    #[test]
    fn single_toppling() {
        let dom = square();
        let p = TopplingParams::discrete(2);
        let mut c = DiscreteConfig::new(vec![4, 0, 0, 0]);
        c.topple(&dom, 0, &p).unwrap();
        assert_eq!(c.heights, vec![0, 1, 1, 0]);
        assert!(matches!(c.topple(&dom, 0, &p), Err(Error::IllegalToppling { .. })));
        assert!(matches!(c.topple_at(&dom, &[5, 5, 0], &p), Err(Error::OutsideDomain(_))));
    }

    #[test]
    fn dissipative_toppling_loses_mass() {
        let dom = BoxDomain::build(2, 0, Shape::Cube).unwrap();
        let p = TopplingParams::continuous(2, 0.5).unwrap();
        let mut c = ContinuousConfig::new(vec![4.5]);
        c.topple(&dom, 0, &p).unwrap();
        assert_eq!(c.heights, vec![0.0]);
    }

    #[test]
    fn stabilize_examples() {
        let dom = square();
        let p = TopplingParams::discrete(2);
        let stable = DiscreteConfig::new(vec![3, 1, 0, 2]);
        let (s, odo) = stable.stabilize(&dom, &p);
        assert_eq!(s, stable);
        assert!(odo.0.iter().all(|&u| u == 0));

        let (s, odo) = DiscreteConfig::new(vec![4, 0, 0, 0]).stabilize(&dom, &p);
        assert_eq!(s.heights, vec![0, 1, 1, 0]);
        assert_eq!(odo.0, vec![1, 0, 0, 0]);

        let full = DiscreteConfig::new(vec![4; 4]);
        let (queue, _) = full.stabilize(&dom, &p);
        let mut rng = stream_rng(1, 0);
        for _ in 0..100 {
            assert_eq!(full.stabilize_random_order(&dom, &p, &mut rng).0, queue);
        }
        assert_eq!(queue.stabilize(&dom, &p).0, queue);
    }

    #[test]
    fn chain_steps() {
        let mut rng = stream_rng(0, 0);
        let one = BoxDomain::build(2, 0, Shape::Cube).unwrap();
        let p = TopplingParams::discrete(2);
        let c = DiscreteConfig::new(vec![3]).chain_step(&one, None, &p, &mut rng).unwrap();
        assert_eq!(c.heights, vec![0]);

        let two = BoxDomain::from_points(2, &[[0, 0, 0], [1, 0, 0]]).unwrap();
        let c = DiscreteConfig::new(vec![3, 3]).chain_step(&two, Some(0), &p, &mut rng).unwrap();
        assert_eq!(c.heights, vec![1, 0]);

        let pc = TopplingParams::continuous(2, 0.5).unwrap();
        let c = ContinuousConfig::new(vec![3.9]).chain_step(&one, None, &pc, &mut rng).unwrap();
        assert!((c.heights[0] - 0.4).abs() < 1e-12);

        let unstable = DiscreteConfig::new(vec![4]);
        assert!(matches!(unstable.chain_step(&one, None, &p, &mut rng), Err(Error::Unstable)));
    }

    #[test]
    fn params_validation() {
        assert!(TopplingParams::continuous(2, -0.1).is_err());
        assert!(TopplingParams::continuous(2, f64::NAN).is_err());
        let bad = TopplingParams { d: 2, gamma: 0.5, mode: Mode::Discrete };
        assert!(bad.validate().is_err());
        assert!(TopplingParams::continuous(5, 0.1).is_err());
    }

    #[test]
    fn fsc_examples() {
        let dom = square();
        let w = fsc_scan(&dom, &[0, 0, 3, 3], FscMode::Exhaustive).unwrap().unwrap();
        assert_eq!(w, vec![0, 1]);
        assert!(fsc_scan(&dom, &[3; 4], FscMode::Exhaustive).unwrap().is_none());
        let w = fsc_scan(&dom, &[1; 4], FscMode::Exhaustive).unwrap().unwrap();
        assert_eq!(w, vec![0, 1, 2, 3]);
        assert!(is_forbidden(&dom, &[1; 4], &w));
        let burn = fsc_scan(&dom, &[1; 4], FscMode::Burning).unwrap().unwrap();
        assert!(is_forbidden(&dom, &[1; 4], &burn));

        let big = BoxDomain::build(2, 2, Shape::Cube).unwrap();
        assert!(matches!(
            fsc_scan(&big, &[3; 25], FscMode::Exhaustive),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn monotone_in_gamma() {
        let dom = BoxDomain::build(2, 2, Shape::Cube).unwrap();
        let mut rng = stream_rng(3, 0);
        for _ in 0..200 {
            let heights: Vec<f64> = (0..dom.len()).map(|_| rng.random_range(0.0..12.0)).collect();
            let c = ContinuousConfig::new(heights);
            let mut last = u64::MAX;
            for gamma in [0.0, 0.1, 0.5, 1.0, 3.0] {
                let p = TopplingParams::continuous(2, gamma).unwrap();
                let (_, odo) = c.stabilize(&dom, &p);
                let total: u64 = odo.0.iter().sum();
                assert!(total <= last);
                last = total;
            }
        }
    }

    #[test]
    fn config_file_round_trip() {
        let text = r#"{"d":2,"gamma":0.0,"shape":"cube","k":0,"heights":[5]}"#;
        let f: ConfigFile = serde_json::from_str(text).unwrap();
        let (dom, p, cfg) = f.typed().unwrap();
        let AnyConfig::Discrete(c) = cfg else { panic!("expected discrete") };
        let (s, odo) = c.stabilize(&dom, &p);
        let out = f.with_result(&s, &odo);
        assert_eq!(out.heights, vec![1.0]);
        assert_eq!(out.odometer, Some(vec![1]));

        let bad = r#"{"d":2,"gamma":0.0,"shape":"cube","k":1,"heights":[1,2]}"#;
        let f: ConfigFile = serde_json::from_str(bad).unwrap();
        assert!(matches!(f.typed(), Err(Error::LengthMismatch { .. })));

        let square = r#"{"d":2,"gamma":0.0,"shape":"custom","k":0,"sites":[[0,0],[1,0],[0,1],[1,1]],"heights":[4,0,0,0]}"#;
        let f: ConfigFile = serde_json::from_str(square).unwrap();
        let (dom, p, cfg) = f.typed().unwrap();
        let AnyConfig::Discrete(c) = cfg else { panic!("expected discrete") };
        assert_eq!(c.stabilize(&dom, &p).0.heights, vec![0, 1, 1, 0]);
        let no_sites = r#"{"d":2,"gamma":0.0,"shape":"custom","k":0,"heights":[1]}"#;
        assert!(serde_json::from_str::<ConfigFile>(no_sites).unwrap().typed().is_err());
    }
}
