//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Run with `cargo test --release --test acceptance`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dsandpile::bijection::local_height_in_tree;
use dsandpile::coupling::{
    beurling_escape, estimate_event_gap, fail_rate_ci_monotone, fit_rate, D3Config, Event, Experiment, GapMode,
};
use dsandpile::lattice::{build_wired_graph, BoxDomain, Shape};
use dsandpile::oracle::{
    burning_matches_fsc, chain_tv, count_trees_exact, enumerate_allowed, enumerate_trees, round_trips,
    square_domain, stationary_deviation, two_site_domain, wilson_law_pvalue,
};
use dsandpile::par::map_replicas;
use dsandpile::rng::stream_rng;
use dsandpile::sandpile::{Config, TopplingParams};
use dsandpile::stats::{frequencies, tv_distance, Proportion};
use dsandpile::walks::cut_time_trend;
use dsandpile::wilson::{coupled_wilson_pair, wilson_sample};
use num_bigint::BigInt;
use rand::Rng;

type Outcome = Result<(bool, String), String>;

fn counting() -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    for (name, dom, expected) in [("two-site", two_site_domain(), 15u64), ("2x2", square_domain(), 192)] {
        let allowed = enumerate_allowed(&dom, false).map_err(|e| e.to_string())?.allowed.len() as u64;
        let det = count_trees_exact(&dom);
        let trees = enumerate_trees(&dom, 0.0).map_err(|e| e.to_string())?.trees.len() as u64;
        ok &= allowed == expected && det == BigInt::from(expected) && trees == expected;
        detail.push(format!("{name}: allowed {allowed}, det {det}, trees {trees}"));
    }
    Ok((ok, detail.join("; ")))
}

fn bijection() -> Outcome {
    let dom = square_domain();
    let (a0, t0, ok0) = round_trips(&dom, false).map_err(|e| e.to_string())?;
    let (a1, t1, ok1) = round_trips(&dom, true).map_err(|e| e.to_string())?;
    Ok((
        ok0 && ok1 && a0 == 192 && t0 == 192,
        format!("discrete {a0} configs / {t0} trees, starred {a1} configs / {t1} trees"),
    ))
}

fn burning() -> Outcome {
    let (total, agree) = burning_matches_fsc(&square_domain()).map_err(|e| e.to_string())?;
    Ok((total == 625 && agree == total, format!("{agree}/{total} starred configs agree")))
}

fn abelian() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for (i, (d, gamma)) in [(2usize, 0.0f64), (2, 0.5), (3, 0.0), (3, 0.5)].into_iter().enumerate() {
        let k = if d == 2 { 2 } else { 1 };
        let dom = BoxDomain::build(d, k, Shape::Cube).map_err(|e| e.to_string())?;
        let n = dom.len();
        let results = map_replicas(1000, |c| -> (bool, f64) {
            let mut rng = stream_rng(40 + i as u64, c);
            let mut same = true;
            let mut dev: f64 = 0.0;
            if gamma == 0.0 {
                let p = TopplingParams::discrete(d);
                let cfg = Config::new((0..n).map(|_| rng.random_range(0..4 * d as u32)).collect::<Vec<u32>>());
                let (q, qo) = cfg.stabilize(&dom, &p);
                for _ in 0..100 {
                    let (r, ro) = cfg.stabilize_random_order(&dom, &p, &mut rng);
                    same &= r == q && ro.0 == qo.0;
                }
            } else {
                let p = TopplingParams::continuous(d, gamma).unwrap();
                let top = 2.0 * (2.0 * d as f64 + gamma);
                let cfg = Config::new((0..n).map(|_| rng.random::<f64>() * top).collect::<Vec<f64>>());
                let (q, qo) = cfg.stabilize(&dom, &p);
                for _ in 0..100 {
                    let (r, ro) = cfg.stabilize_random_order(&dom, &p, &mut rng);
                    same &= ro.0 == qo.0;
                    for (a, b) in r.heights.iter().zip(&q.heights) {
                        dev = dev.max((a - b).abs());
                    }
                }
            }
            (same, dev)
        });
        for (same, dev) in results {
            exact &= same;
            worst = worst.max(dev);
        }
    }
    Ok((exact && worst <= 1e-9, format!("discrete identical: {exact}, max continuous deviation {worst:e}")))
}

fn stationarity() -> Outcome {
    let (support, dev, outside) = stationary_deviation(&two_site_domain()).map_err(|e| e.to_string())?;
    let tv = chain_tv(&square_domain(), 1_000_000, 5).map_err(|e| e.to_string())?;
    Ok((
        support == 15 && dev <= 1e-10 && outside <= 1e-10 && tv < 0.02,
        format!("exact: support {support}, max |pi - 1/15| = {dev:e}, outside mass {outside:e}; chain TV {tv:.5}"),
    ))
}

fn wilson_law() -> Outcome {
    let dom = two_site_domain();
    let p0 = wilson_law_pvalue(&dom, 0.0, 100_000, 6, false).map_err(|e| e.to_string())?[0];
    let p1 = wilson_law_pvalue(&dom, 0.5, 100_000, 7, false).map_err(|e| e.to_string())?[0];
    Ok((p0 > 0.01 && p1 > 0.01, format!("p(gamma=0) = {p0:.4}, p(gamma=0.5) = {p1:.4}")))
}

fn coupled_marginals() -> Outcome {
    let dom = two_site_domain();
    let p = wilson_law_pvalue(&dom, 0.5, 100_000, 8, true).map_err(|e| e.to_string())?;
    let graph = build_wired_graph(dom.clone(), true);
    let mut rng = stream_rng(9, 0);
    let mut identical = true;
    for _ in 0..10_000 {
        let pair = coupled_wilson_pair(&graph, 0.0, &[0, 1], &mut rng).map_err(|e| e.to_string())?;
        identical &= pair.tree0 == pair.tree_gamma;
    }
    Ok((
        p[0] > 0.01 && p[1] > 0.01 && identical,
        format!("critical side p = {:.4}, dissipative side p = {:.4}; lambda = 0 identical: {identical}", p[0], p[1]),
    ))
}

fn height_law() -> Outcome {
    let dom = BoxDomain::build(2, 2, Shape::Cube).map_err(|e| e.to_string())?;
    let origin = dom.index_of(&[0, 0, 0]).unwrap();
    let graph = build_wired_graph(dom.clone(), false);
    let order: Vec<u32> = (0..dom.len() as u32).collect();
    let mut wilson = [0u64; 4];
    for h in map_replicas(100_000, |s| {
        let mut rng = stream_rng(10, s);
        let t = wilson_sample(&graph, 0.0, &order, &mut rng).unwrap();
        local_height_in_tree(&graph, &t, origin).unwrap()
    }) {
        wilson[h as usize] += 1;
    }
    let p = TopplingParams::discrete(2);
    let mut rng = stream_rng(11, 0);
    let mut cfg = Config::new(vec![3u32; dom.len()]);
    for _ in 0..10_000 {
        cfg = cfg.chain_step(&dom, None, &p, &mut rng).map_err(|e| e.to_string())?;
    }
    let mut chain = [0u64; 4];
    for _ in 0..100_000 {
        cfg = cfg.chain_step(&dom, None, &p, &mut rng).map_err(|e| e.to_string())?;
        chain[cfg.heights[origin as usize] as usize] += 1;
    }
    let tv = tv_distance(&frequencies(&wilson), &frequencies(&chain));
    Ok((tv < 0.03, format!("Wilson {wilson:?}, chain {chain:?}, TV {tv:.5}")))
}

fn rate_trend() -> Outcome {
    let exp = Experiment::D3(D3Config::new(1));
    let gammas = [1e-2, 3e-3, 1e-3];
    let event = Event::AnySiteHeight { heights: vec![6] };
    let est = estimate_event_gap(&event, &exp, &gammas, 10_000, 12, GapMode::Independent).map_err(|e| e.to_string())?;
    let a = fail_rate_ci_monotone(&est);
    let b = est.iter().all(|e| e.dominated());
    let fit = fit_rate(&est.iter().map(|e| (e.gamma, e.gap_coupled.abs(), e.gap_coupled_se)).collect::<Vec<_>>());
    let (c, fit_text) = match &fit {
        Ok(f) => (f.slope > 0.0 && f.slope_ci.0 > 0.0, format!("slope {:.3}, CI ({:.3}, {:.3})", f.slope, f.slope_ci.0, f.slope_ci.1)),
        Err(e) => (false, format!("no fit: {e}")),
    };
    let invariants = est.iter().all(|e| e.height_violations == 0 && e.union_violations == 0);
    let rows: Vec<String> = est
        .iter()
        .map(|e| {
            format!(
                "g={}: fail {:.4}±{:.4}, gap {:.4}±{:.4}, indep {:.4}±{:.4}",
                e.gamma, e.fail_rate, e.fail_se, e.gap_coupled, e.gap_coupled_se, e.gap_indep, e.gap_indep_se
            )
        })
        .collect();
    Ok((
        a && b && c && invariants,
        format!("(a) {a} (b) {b} (c) {c} [{fit_text}]; invariants {invariants}; {}", rows.join("; ")),
    ))
}

fn cut_time() -> Outcome {
    let trend = cut_time_trend(3, 5, &[10, 20, 40], 8, 10_000, 13).map_err(|e| e.to_string())?;
    let ci: Vec<(f64, f64)> = trend.hits.iter().map(|h: &Proportion| h.wilson_interval(1.96)).collect();
    let monotone = ci.windows(2).all(|w| w[1].1 >= w[0].0);
    let pointwise = trend.hits.windows(2).all(|w| w[1].mean() >= w[0].mean());
    let text: Vec<String> = trend
        .ns
        .iter()
        .zip(&trend.hits)
        .map(|(n, h)| format!("n={n}: {:.4}±{:.4}", h.mean(), h.se()))
        .collect();
    Ok((monotone, format!("{} (pointwise increasing: {pointwise})", text.join(", "))))
}

fn beurling() -> Outcome {
    let b = beurling_escape(5, &[20, 40, 80], 100, 10_000, 14).map_err(|e| e.to_string())?;
    let fit = b.fit.ok_or("no fit")?;
    Ok((
        fit.slope <= -0.4,
        format!("sup escape {:?}, slope {:.3} (CI {:.3}, {:.3})", b.sup, fit.slope, fit.slope_ci.0, fit.slope_ci.1),
    ))
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(i32, Vec<u8>), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dsandpile"))
        .args(args)
        .current_dir(dir)
        .env_remove("DSANDPILE_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    Ok((out.status.code().unwrap_or(-1), out.stdout))
}

fn determinism() -> Outcome {
    let experiments: Vec<(Vec<&str>, Vec<&str>)> = vec![
        (vec!["oracle", "quick"], vec![]),
        (vec!["stabilize", "config.json"], vec![]),
        (vec!["stabilize", "config.json", "--random-order"], vec![]),
        (vec!["burn", "stable.json"], vec![]),
        (vec!["sample", "chain", "--k", "2", "--steps", "20000"], vec![]),
        (vec!["sample", "chain", "--k", "1", "--gamma", "0.5", "--steps", "20000"], vec![]),
        (vec!["sample", "wilson", "--k", "3", "--gamma", "0.1", "--samples", "3000", "--tree-out", "tree.json"], vec!["tree.json"]),
        (vec!["couple", "--k", "1", "--gamma", "0.01", "--replicas", "24", "--reports", "r.jsonl"], vec!["r.jsonl"]),
        (vec!["couple", "--d", "2", "--k", "1", "--gamma", "1e-4", "--replicas", "24"], vec![]),
        (
            vec!["rate", "--k", "0", "--gammas", "0.1,0.01", "--replicas", "60", "--out", "rate.csv", "--emit-gnuplot-script"],
            vec!["rate.csv", "rate.json", "rate.gp"],
        ),
    ];
    let config = r#"{"d":2,"gamma":0.3,"shape":"cube","k":2,"heights":[9,1,2,3,7,0,5,1,8,2,3,3,12,0,1,4,4,4,2,6,1,0,3,2,9]}"#;
    let stable = r#"{"d":2,"gamma":0.3,"shape":"cube","k":1,"heights":[4.1,0.5,3.2,1,2.9,0,3.99,1.5,0.2]}"#;
    let mut failures = Vec::new();
    for (args, files) in &experiments {
        let mut runs = Vec::new();
        for threads in ["1", "3", "1"] {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            std::fs::write(dir.path().join("config.json"), config).map_err(|e| e.to_string())?;
            std::fs::write(dir.path().join("stable.json"), stable).map_err(|e| e.to_string())?;
            let mut full: Vec<&str> = vec!["--seed", "2024", "--threads", threads];
            full.extend(args);
            let (code, stdout) = run_cli(dir.path(), &full)?;
            let contents: Vec<Vec<u8>> =
                files.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap_or_default()).collect();
            runs.push((code, stdout, contents));
        }
        if runs[0].0 != 0 || runs.iter().any(|r| *r != runs[0]) {
            failures.push(format!("{} (exit {})", args.join(" "), runs[0].0));
        }
    }
    Ok((
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} experiments identical over 3 runs, threads 1/3/1", experiments.len())
        } else {
            format!("differing: {}", failures.join(", "))
        },
    ))
}

fn main() {
    let minute = Some(Duration::from_secs(60));
    let criteria: Vec<(&str, fn() -> Outcome, Option<Duration>)> = vec![
        ("1 counting identity", counting, minute),
        ("2 bijection round trip", bijection, minute),
        ("3 burning = FSC", burning, None),
        ("4 abelian property", abelian, None),
        ("5 stationarity", stationarity, None),
        ("6 Wilson law", wilson_law, None),
        ("7 coupled marginals", coupled_marginals, None),
        ("8 height-law cross-validation", height_law, None),
        ("9 d=3 coupling rate properties", rate_trend, Some(Duration::from_secs(30 * 60))),
        ("10 cut-time trend", cut_time, None),
        ("11 Beurling trend", beurling, None),
        ("12 CLI determinism", determinism, None),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f, limit) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.starts_with(&format!("{o} "))) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let elapsed = start.elapsed();
        let pass = pass && limit.is_none_or(|l| elapsed <= l);
        failed += !pass as u32;
        let secs = elapsed.as_secs_f64();
        println!("{} criterion {name}: {detail} [{secs:.1}s]", if pass { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
