//! The burning test: rounds B₁, B₂, … of burnt sites, or the unburnable
//! leftover when the configuration is not allowed.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{BoxDomain, Direction};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BurnSchedule {
    /// `rounds[i]` is B_{i+1}; the first entry is B₁ = {ξ = 2d}, possibly empty.
    pub rounds: Vec<Vec<u32>>,
    /// Unburnt sites at termination; empty iff the configuration is allowed.
    pub leftover: Vec<u32>,
    /// Burning time per site, 0 for leftover sites.
    pub level: Vec<u32>,
}

impl BurnSchedule {
    pub fn is_allowed(&self) -> bool {
        self.leftover.is_empty()
    }
}

fn check_heights(domain: &BoxDomain, xi: &[u8]) -> Result<u8> {
    if xi.len() != domain.len() {
        return Err(Error::LengthMismatch { expected: domain.len(), got: xi.len() });
    }
    let cap = 2 * domain.dim() as u8;
    if let Some((site, &h)) = xi.iter().enumerate().find(|(_, &h)| h > cap) {
        return Err(Error::HeightOutOfRange { site, height: h as f64 });
    }
    Ok(cap)
}

fn finish(domain: &BoxDomain, rounds: Vec<Vec<u32>>, level: Vec<u32>) -> BurnSchedule {
    let leftover = (0..domain.len() as u32).filter(|&x| level[x as usize] == 0).collect();
    BurnSchedule { rounds, leftover, level }
}

/// Frontier version: after B₂ only neighbours of the previous round can
/// change status, so each site is examined O(d) times.
pub fn burning_test(domain: &BoxDomain, xi: &[u8]) -> Result<BurnSchedule> {
    let cap = check_heights(domain, xi)?;
    let n = domain.len();
    let d = domain.dim();
    let mut unburnt_nbrs: Vec<u8> = (0..n as u32).map(|x| domain.inner_degree(x) as u8).collect();
    let mut level = vec![0u32; n];
    let mut seen = vec![0u32; n];
    let mut rounds = Vec::new();

    let burn = |round: &[u32], i: u32, level: &mut Vec<u32>, counts: &mut Vec<u8>| {
        for &x in round {
            level[x as usize] = i;
        }
        for &x in round {
            for dir in Direction::all(d) {
                if let Some(y) = domain.neighbor(x, dir) {
                    counts[y as usize] -= 1;
                }
            }
        }
    };

    let b1: Vec<u32> = (0..n as u32).filter(|&x| xi[x as usize] == cap).collect();
    burn(&b1, 1, &mut level, &mut unburnt_nbrs);
    rounds.push(b1);

    let mut current: Vec<u32> = (0..n as u32)
        .filter(|&x| level[x as usize] == 0 && xi[x as usize] >= unburnt_nbrs[x as usize])
        .collect();
    let mut i = 2;
    while !current.is_empty() {
        burn(&current, i, &mut level, &mut unburnt_nbrs);
        let mut next = Vec::new();
        for &x in &current {
            for dir in Direction::all(d) {
                if let Some(y) = domain.neighbor(x, dir) {
                    let yu = y as usize;
                    if level[yu] == 0 && seen[yu] != i && xi[yu] >= unburnt_nbrs[yu] {
                        seen[yu] = i;
                        next.push(y);
                    }
                }
            }
        }
        next.sort_unstable();
        rounds.push(std::mem::replace(&mut current, next));
        i += 1;
    }
    Ok(finish(domain, rounds, level))
}

/// Reference version recounting unburnt neighbours from scratch every round.
pub fn burning_test_naive(domain: &BoxDomain, xi: &[u8]) -> Result<BurnSchedule> {
    let cap = check_heights(domain, xi)?;
    let n = domain.len() as u32;
    let mut level = vec![0u32; n as usize];
    let b1: Vec<u32> = (0..n).filter(|&x| xi[x as usize] == cap).collect();
    for &x in &b1 {
        level[x as usize] = 1;
    }
    let mut rounds = vec![b1];
    let mut i = 2;
    loop {
        let round: Vec<u32> = (0..n)
            .filter(|&x| level[x as usize] == 0)
            .filter(|&x| {
                let unburnt = Direction::all(domain.dim())
                    .filter_map(|dir| domain.neighbor(x, dir))
                    .filter(|&y| level[y as usize] == 0)
                    .count();
                xi[x as usize] as usize >= unburnt
            })
            .collect();
        if round.is_empty() {
            break;
        }
        for &x in &round {
            level[x as usize] = i;
        }
        rounds.push(round);
        i += 1;
    }
    Ok(finish(domain, rounds, level))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Shape;
    use crate::sandpile::is_forbidden;

    fn square() -> BoxDomain {
        BoxDomain::from_points(2, &[[0, 0, 0], [0, 1, 0], [1, 0, 0], [1, 1, 0]]).unwrap()
    }

    #[test]
    fn maximal_stable_config_burns_from_boundary() {
        let dom = BoxDomain::build(2, 2, Shape::Cube).unwrap();
        let s = burning_test(&dom, &vec![3; dom.len()]).unwrap();
        assert!(s.is_allowed());
        assert!(s.rounds[0].is_empty());
        let boundary = dom.sites().iter().filter(|p| p[0].abs() == 2 || p[1].abs() == 2).count();
        assert_eq!(s.rounds[1].len(), boundary);
    }

    #[test]
    fn adjacent_zeros_are_left_over() {
        let dom = square();
        let s = burning_test(&dom, &[0, 0, 3, 3]).unwrap();
        assert_eq!(s.leftover, vec![0, 1]);
        assert!(is_forbidden(&dom, &[0, 0, 3, 3], &s.leftover));
    }

    #[test]
    fn full_sites_burn_first() {
        let dom = square();
        let s = burning_test(&dom, &[4, 1, 1, 3]).unwrap();
        assert_eq!(s.rounds[0], vec![0]);
        assert_eq!(s.level[0], 1);
        assert!(s.is_allowed());
    }

    #[test]
    fn rejects_bad_heights() {
        let dom = square();
        assert!(matches!(burning_test(&dom, &[5, 0, 0, 0]), Err(Error::HeightOutOfRange { .. })));
        assert!(matches!(burning_test(&dom, &[0, 0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn frontier_matches_naive_on_random_configs() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(11, 0);
        for (d, k) in [(2, 3), (3, 1), (3, 2)] {
            let dom = BoxDomain::build(d, k, Shape::Cube).unwrap();
            for _ in 0..300 {
                let xi: Vec<u8> = (0..dom.len()).map(|_| rng.random_range(0..=2 * d as u8)).collect();
                let a = burning_test(&dom, &xi).unwrap();
                let b = burning_test_naive(&dom, &xi).unwrap();
                assert_eq!(a, b);
                let mut all: Vec<u32> = a.rounds.iter().flatten().chain(&a.leftover).copied().collect();
                all.sort_unstable();
                assert_eq!(all, (0..dom.len() as u32).collect::<Vec<_>>());
                if !a.is_allowed() {
                    let h: Vec<u32> = xi.iter().map(|&h| h as u32).collect();
                    assert!(is_forbidden(&dom, &h, &a.leftover));
                }
            }
        }
    }
}
