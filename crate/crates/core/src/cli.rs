//! The `dsandpile` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::bijection::{discretize, local_height_in_tree, StarConfig};
use crate::burning::burning_test;
use crate::coupling::{
    fail_rate_ci_monotone, fit_rate, run_replica, summarize, CouplingReport, D2Config, D2Guard, D3Config, Event,
    Experiment, GapEstimate, GapMode, RateFit,
};
use crate::error::{Error, Result};
use crate::lattice::{build_wired_graph, BoxDomain, Shape};
use crate::oracle::{run_suite, Suite};
use crate::par::{map_replicas, with_threads};
use crate::rng::stream_rng;
use crate::sandpile::{AnyConfig, Config, ConfigFile, TopplingParams};
use crate::wilson::wilson_sample;

pub const BUILD_ID: &str = env!("DSANDPILE_BUILD_ID");

#[derive(Debug, Parser)]
#[command(name = "dsandpile", version, about = "Dissipative sandpiles, spanning trees and couplings")]
pub struct Cli {
    /// Base seed of every experiment.
    #[arg(long, global = true, env = "DSANDPILE_SEED", default_value_t = 1)]
    pub seed: u64,
    /// Worker threads (default: available parallelism). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stabilize a configuration file and print the result with its odometer.
    Stabilize {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Topple unstable sites in random order instead of queue order.
        #[arg(long)]
        random_order: bool,
    },
    /// Run the burning test on a configuration file.
    Burn { config: PathBuf },
    /// Sample from the sandpile chain or from Wilson's algorithm.
    Sample {
        #[command(subcommand)]
        kind: SampleKind,
    },
    /// Run coupling replicas at one γ and report the condition tallies.
    Couple(CoupleArgs),
    /// Estimate the coupling failure rate and event gaps over a γ grid.
    Rate(RateArgs),
    /// Run the brute-force oracle table.
    Oracle {
        #[arg(value_enum)]
        level: Level,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Level {
    Quick,
    Full,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeArg {
    Cube,
    Ball,
}

impl From<ShapeArg> for Shape {
    fn from(s: ShapeArg) -> Shape {
        match s {
            ShapeArg::Cube => Shape::Cube,
            ShapeArg::Ball => Shape::Ball,
        }
    }
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct DomainArgs {
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub k: u32,
    #[arg(long, value_enum, default_value = "cube")]
    pub shape: ShapeArg,
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
}

#[derive(Debug, Subcommand)]
pub enum SampleKind {
    /// Run the addition chain from the maximal stable configuration.
    Chain {
        #[command(flatten)]
        domain: DomainArgs,
        #[arg(long, default_value_t = 10_000)]
        steps: u64,
        #[arg(long, default_value_t = 1_000)]
        burn_in: u64,
    },
    /// Sample spanning trees with weight γ^H(t).
    Wilson {
        #[command(flatten)]
        domain: DomainArgs,
        #[arg(long, default_value_t = 1_000)]
        samples: u64,
        /// Write the last sampled tree here.
        #[arg(long)]
        tree_out: Option<PathBuf>,
    },
}

#[derive(Debug, Args, Clone)]
pub struct CouplingArgs {
    #[arg(long, default_value_t = 3)]
    pub d: usize,
    #[arg(long, default_value_t = 1)]
    pub k: u32,
    /// Radius grid (d = 3); default {2k, 4k, 8k}.
    #[arg(long, value_delimiter = ',')]
    pub m: Vec<u32>,
    /// Radius of the wired ball (d = 3); default 8·max m.
    #[arg(long)]
    pub n_big: Option<f64>,
    /// Radius of the critical-side ball (d = 2); default 4R.
    #[arg(long)]
    pub n_fin: Option<u32>,
    /// Arrow (d = 3) or step (d = 2) budget per replica.
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long, default_value_t = 1.0)]
    pub c0: f64,
    #[arg(long, default_value_t = 23.0)]
    pub big_c0: f64,
}

impl CouplingArgs {
    fn experiment(&self) -> Result<Experiment> {
        match self.d {
            3 => {
                let mut cfg = D3Config::new(self.k);
                if !self.m.is_empty() {
                    cfg.m_grid = self.m.clone();
                    cfg.n_big = 8.0 * *cfg.m_grid.iter().max().unwrap() as f64;
                }
                if let Some(n) = self.n_big {
                    cfg.n_big = n;
                }
                if let Some(b) = self.budget {
                    cfg.budget = b;
                }
                cfg.validate()?;
                Ok(Experiment::D3(cfg))
            }
            2 => {
                if !self.m.is_empty() || self.n_big.is_some() {
                    return Err(Error::Config("--m and --n-big apply to d = 3; d = 2 derives m from gamma".into()));
                }
                let mut cfg = D2Config::new(self.k);
                cfg.guard = D2Guard { c0: self.c0, big_c0: self.big_c0 };
                cfg.n_fin = self.n_fin;
                if let Some(b) = self.budget {
                    cfg.budget = b;
                }
                if self.k == 0 {
                    return Err(Error::Config("d = 2 coupling needs k >= 1".into()));
                }
                Ok(Experiment::D2(cfg))
            }
            d => Err(Error::UnsupportedDimension(d)),
        }
    }
}

#[derive(Debug, Args)]
pub struct CoupleArgs {
    #[command(flatten)]
    pub coupling: CouplingArgs,
    #[arg(long)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1_000)]
    pub replicas: u64,
    /// Write every replica report as one JSON line.
    #[arg(long)]
    pub reports: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RateArgs {
    #[command(flatten)]
    pub coupling: CouplingArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    pub gammas: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    pub replicas: u64,
    #[arg(long, value_enum, default_value = "independent")]
    pub mode: ModeArg,
    /// `full`, `any:H[,H]` or `site:x,y[,z]:H[,H]`, where H may be `top` (2d).
    #[arg(long, default_value = "any:top")]
    pub event: String,
    /// CSV output; the JSON sidecar and plot script sit next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub emit_gnuplot_script: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Coupled,
    Independent,
}

impl From<ModeArg> for GapMode {
    fn from(m: ModeArg) -> GapMode {
        match m {
            ModeArg::Coupled => GapMode::Coupled,
            ModeArg::Independent => GapMode::Independent,
        }
    }
}

pub fn parse_event(text: &str, d: usize) -> Result<Event> {
    let heights = |list: &str| -> Result<Vec<u8>> {
        list.split(',')
            .map(|h| match h.trim() {
                "top" => Ok(2 * d as u8),
                v => v.parse::<u8>().map_err(|_| Error::Config(format!("bad height {v:?} in event"))),
            })
            .collect()
    };
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        ["full"] => Ok(Event::Full),
        ["any", hs] => Ok(Event::AnySiteHeight { heights: heights(hs)? }),
        ["site", xs, hs] => {
            let site = xs
                .split(',')
                .map(|c| c.trim().parse::<i32>().map_err(|_| Error::Config(format!("bad coordinate {c:?} in event"))))
                .collect::<Result<Vec<_>>>()?;
            Ok(Event::SiteHeight { site, heights: heights(hs)? })
        }
        _ => Err(Error::Config(format!("cannot parse event {text:?}"))),
    }
}

/// Whether a command ran to completion with its assertions holding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    AssertionFailed,
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 1 when an experiment assertion fails, 2 on usage or
/// configuration errors.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 { write!(out, "{}", e.render()) } else { write!(err, "{}", e.render()) };
            return if code == 0 { 0 } else { 2 };
        }
    };
    match run(&cli, out) {
        Ok(Status::Ok) => 0,
        Ok(Status::AssertionFailed) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<Status> {
    let seed = cli.seed;
    match &cli.command {
        Command::Stabilize { config, out: path, random_order } => stabilize(config, path.as_deref(), *random_order, seed, out),
        Command::Burn { config } => burn(config, out),
        Command::Sample { kind } => pooled(cli.threads, out, |buf| sample(kind, seed, buf)),
        Command::Couple(args) => pooled(cli.threads, out, |buf| couple(args, seed, buf)),
        Command::Rate(args) => pooled(cli.threads, out, |buf| rate(args, seed, buf)),
        Command::Oracle { level } => {
            let suite = match level {
                Level::Quick => Suite::Quick,
                Level::Full => Suite::Full,
            };
            let table = run_suite(suite, seed)?;
            let pass = table.iter().all(|c| c.pass);
            emit(out, &json!({ "build": BUILD_ID, "level": format!("{level:?}").to_lowercase(), "pass": pass, "checks": table }))?;
            Ok(if pass { Status::Ok } else { Status::AssertionFailed })
        }
    }
}

/// Runs `f` on a pool of `threads` workers, buffering its output.
fn pooled<F>(threads: Option<usize>, out: &mut dyn Write, f: F) -> Result<Status>
where
    F: FnOnce(&mut dyn Write) -> Result<Status> + Send,
{
    let mut buf = Vec::new();
    let status = with_threads(threads, || f(&mut buf))??;
    out.write_all(&buf)?;
    Ok(status)
}

fn emit(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn stabilize(path: &Path, target: Option<&Path>, random_order: bool, seed: u64, out: &mut dyn Write) -> Result<Status> {
    let file = ConfigFile::load(path)?;
    let (domain, params, cfg) = file.typed()?;
    let mut rng = stream_rng(seed, 0);
    let result = match cfg {
        AnyConfig::Discrete(c) => {
            let (s, odo) = if random_order { c.stabilize_random_order(&domain, &params, &mut rng) } else { c.stabilize(&domain, &params) };
            file.with_result(&s, &odo)
        }
        AnyConfig::Continuous(c) => {
            let (s, odo) = if random_order { c.stabilize_random_order(&domain, &params, &mut rng) } else { c.stabilize(&domain, &params) };
            file.with_result(&s, &odo)
        }
    };
    match target {
        Some(p) => std::fs::write(p, serde_json::to_string_pretty(&result)? + "\n")?,
        None => emit(out, &result)?,
    }
    Ok(Status::Ok)
}

fn star_heights(file: &ConfigFile, domain: &BoxDomain, cfg: AnyConfig) -> Result<StarConfig> {
    match cfg {
        AnyConfig::Discrete(c) => {
            let xi = c.heights.iter().map(|&h| u8::try_from(h).unwrap_or(u8::MAX)).collect();
            StarConfig::new(domain.dim(), xi)
        }
        AnyConfig::Continuous(c) => {
            if c.heights.iter().any(|&h| h < 0.0 || h >= 2.0 * file.d as f64 + file.gamma) {
                return Err(Error::Config("burning needs a stable configuration".into()));
            }
            discretize(domain.dim(), &c)
        }
    }
}

fn burn(path: &Path, out: &mut dyn Write) -> Result<Status> {
    let file = ConfigFile::load(path)?;
    let (domain, _, cfg) = file.typed()?;
    let xi = star_heights(&file, &domain, cfg)?;
    let schedule = burning_test(&domain, xi.heights())?;
    let site = |i: &u32| domain.site(*i)[..domain.dim()].to_vec();
    emit(
        out,
        &json!({
            "allowed": schedule.is_allowed(),
            "star_heights": xi.heights(),
            "rounds": schedule.rounds.iter().map(|r| r.iter().map(site).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "leftover": schedule.leftover.iter().map(site).collect::<Vec<_>>(),
        }),
    )?;
    Ok(Status::Ok)
}

fn sample(kind: &SampleKind, seed: u64, out: &mut dyn Write) -> Result<Status> {
    match kind {
        SampleKind::Chain { domain: a, steps, burn_in } => {
            let domain = BoxDomain::build(a.d, a.k, a.shape.into())?;
            let origin = domain.index_of(&[0; 3]).ok_or(Error::OutsideDomain([0; 3]))? as usize;
            let mut rng = stream_rng(seed, 0);
            let mut hist = vec![0u64; 2 * a.d + 1];
            let file = ConfigFile { d: a.d, gamma: a.gamma, shape: a.shape.into(), k: a.k, heights: Vec::new(), sites: None, odometer: None };
            let last = if a.gamma == 0.0 {
                let params = TopplingParams::discrete(a.d);
                let mut c = Config::new(vec![2 * a.d as u32 - 1; domain.len()]);
                for t in 0..burn_in + steps {
                    c = c.chain_step(&domain, None, &params, &mut rng)?;
                    if t >= *burn_in {
                        hist[c.heights[origin] as usize] += 1;
                    }
                }
                c.heights.iter().map(|&h| h as f64).collect()
            } else {
                let params = TopplingParams::continuous(a.d, a.gamma)?;
                let mut c = Config::new(vec![2.0 * a.d as f64 - 1.0; domain.len()]);
                for t in 0..burn_in + steps {
                    c = c.chain_step(&domain, None, &params, &mut rng)?;
                    if t >= *burn_in {
                        hist[(c.heights[origin].floor() as usize).min(2 * a.d)] += 1;
                    }
                }
                c.heights.clone()
            };
            emit(
                out,
                &json!({
                    "build": BUILD_ID, "seed": seed, "params": a, "steps": steps, "burn_in": burn_in,
                    "origin_height_histogram": hist, "final": ConfigFile { heights: last, ..file },
                }),
            )?;
        }
        SampleKind::Wilson { domain: a, samples, tree_out } => {
            let domain = BoxDomain::build(a.d, a.k, a.shape.into())?;
            let origin = domain.index_of(&[0; 3]).ok_or(Error::OutsideDomain([0; 3]))?;
            let graph = build_wired_graph(domain.clone(), a.gamma > 0.0);
            let order: Vec<u32> = (0..domain.len() as u32).collect();
            let trees = map_replicas(*samples, |s| -> Result<_> {
                let mut rng = stream_rng(seed, s);
                let t = wilson_sample(&graph, a.gamma, &order, &mut rng)?;
                Ok((local_height_in_tree(&graph, &t, origin)?, t.h(), t))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let mut heights = vec![0u64; 2 * a.d + 1];
            let mut h_hist = vec![0u64; domain.len() + 1];
            for (h, hh, _) in &trees {
                heights[*h as usize] += 1;
                h_hist[*hh] += 1;
            }
            while h_hist.len() > 1 && *h_hist.last().unwrap() == 0 {
                h_hist.pop();
            }
            if let (Some(p), Some((_, _, t))) = (tree_out, trees.last()) {
                std::fs::write(p, serde_json::to_string(&t.to_json(&domain))? + "\n")?;
            }
            emit(
                out,
                &json!({
                    "build": BUILD_ID, "seed": seed, "params": a, "samples": samples,
                    "origin_height_histogram": heights, "dissipative_edge_histogram": h_hist,
                }),
            )?;
        }
    }
    Ok(Status::Ok)
}

#[derive(Debug, Default, Serialize)]
struct RadiusTally {
    m: u32,
    successes: u64,
    pair_meet_failures: u64,
    pair_agree_failures: u64,
    witness_agree_failures: u64,
    inner_failures: u64,
}

fn tally(reports: &[CouplingReport]) -> Value {
    let n = reports.len() as u64;
    let successes = reports.iter().filter(|r| r.success).count() as u64;
    let mut out = json!({
        "replicas": n,
        "successes": successes,
        "inconclusive": reports.iter().filter(|r| r.inconclusive).count(),
        "fail_rate": (n - successes) as f64 / n as f64,
        "height_violations": reports.iter().filter(|r| !r.heights_consistent()).count(),
        "union_violations": reports.iter().filter(|r| !r.union_bound_holds()).count(),
    });
    if let Some(first) = reports.first() {
        if let Some(p) = &first.planar {
            out["schedule"] = serde_json::to_value(&p.schedule).unwrap_or(Value::Null);
            out["n_fin"] = json!(p.n_fin);
            let planar: Vec<_> = reports.iter().filter_map(|r| r.planar.as_ref()).collect();
            out["origin_failures"] = json!(planar.iter().filter(|e| !e.origin_agrees).count());
            out["boundary_failures"] = json!(planar.iter().map(|e| e.boundary.iter().filter(|b| !**b).count()).sum::<usize>());
            out["inner_failures"] = json!(planar.iter().map(|e| e.inner.iter().filter(|b| !**b).count()).sum::<usize>());
        } else {
            let mut radii: Vec<RadiusTally> =
                first.radii.iter().map(|r| RadiusTally { m: r.m, ..Default::default() }).collect();
            for r in reports {
                for (t, o) in radii.iter_mut().zip(&r.radii) {
                    t.successes += o.success as u64;
                    t.pair_meet_failures += o.pairs.iter().filter(|p| !p.meets).count() as u64;
                    t.pair_agree_failures += o.pairs.iter().filter(|p| !p.agrees).count() as u64;
                    t.witness_agree_failures += o.pairs.iter().filter(|p| !p.witness_agrees).count() as u64;
                    t.inner_failures += o.inner.iter().filter(|b| !**b).count() as u64;
                }
            }
            out["radii"] = serde_json::to_value(radii).unwrap_or(Value::Null);
        }
    }
    out
}

fn couple(args: &CoupleArgs, seed: u64, out: &mut dyn Write) -> Result<Status> {
    if args.replicas == 0 {
        return Err(Error::Config("replicas must be positive".into()));
    }
    if !(args.gamma > 0.0 && args.gamma.is_finite()) {
        return Err(Error::Config("gamma must be positive".into()));
    }
    let exp = args.coupling.experiment()?;
    let reports: Vec<CouplingReport> = map_replicas(args.replicas, |r| run_replica(&exp, &[args.gamma], seed, r, false))
        .into_iter()
        .map(|o| o.map(|mut o| o.coupled.remove(0)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(p) = &args.reports {
        let mut text = String::new();
        for r in &reports {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        std::fs::write(p, text)?;
    }
    let t = tally(&reports);
    let ok = t["height_violations"] == 0 && t["union_violations"] == 0;
    emit(out, &json!({ "build": BUILD_ID, "seed": seed, "gamma": args.gamma, "experiment": exp, "summary": t }))?;
    Ok(if ok { Status::Ok } else { Status::AssertionFailed })
}

#[derive(Serialize)]
struct RateChecks {
    fail_rate_ci_monotone: bool,
    independent_dominated: bool,
    height_violations: u64,
    union_violations: u64,
}

fn csv_field(x: f64) -> String {
    if x.is_nan() { String::new() } else { format!("{x}") }
}

fn rate(args: &RateArgs, seed: u64, out: &mut dyn Write) -> Result<Status> {
    if args.replicas == 0 {
        return Err(Error::Config("replicas must be positive".into()));
    }
    if args.gammas.is_empty() || args.gammas.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
        return Err(Error::Config("gammas must be positive".into()));
    }
    let exp = args.coupling.experiment()?;
    let event = parse_event(&args.event, exp.dim())?;
    event.check(exp.dim(), exp.k())?;
    let mode: GapMode = args.mode.into();
    let independent = mode == GapMode::Independent;
    let outcomes = map_replicas(args.replicas, |r| run_replica(&exp, &args.gammas, seed, r, independent))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let est = summarize(&event, &exp, &args.gammas, &outcomes)?;
    let gap_fit = fit_rate(&est.iter().map(|e| (e.gamma, e.gap_coupled.abs(), e.gap_coupled_se)).collect::<Vec<_>>()).ok();
    let fail_fit = fit_rate(&est.iter().map(|e| (e.gamma, e.fail_rate, e.fail_se)).collect::<Vec<_>>()).ok();
    let indep_fit = if independent {
        fit_rate(&est.iter().map(|e| (e.gamma, e.gap_indep.abs(), e.gap_indep_se)).collect::<Vec<_>>()).ok()
    } else {
        None
    };
    let checks = RateChecks {
        fail_rate_ci_monotone: fail_rate_ci_monotone(&est),
        independent_dominated: est.iter().all(GapEstimate::dominated),
        height_violations: est.iter().map(|e| e.height_violations).sum(),
        union_violations: est.iter().map(|e| e.union_violations).sum(),
    };

    let mut csv = String::from("gamma,replicas,fail_rate,fail_se,gap_coupled,gap_coupled_se,gap_indep,gap_se,slope,slope_se,slope_lo,slope_hi\n");
    let slope = |f: &Option<RateFit>| match f {
        Some(f) => [f.slope, f.slope_se, f.slope_ci.0, f.slope_ci.1].map(csv_field).join(","),
        None => ",,,".into(),
    };
    for e in &est {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            e.gamma,
            e.replicas,
            e.fail_rate,
            e.fail_se,
            e.gap_coupled,
            e.gap_coupled_se,
            csv_field(e.gap_indep),
            csv_field(e.gap_indep_se),
            slope(&gap_fit)
        ));
    }
    std::fs::write(&args.out, csv)?;
    let sidecar = json!({
        "build": BUILD_ID,
        "command": "rate",
        "config": {
            "seed": seed,
            "gammas": args.gammas,
            "replicas": args.replicas,
            "mode": mode,
            "event": event,
            "experiment": exp,
        },
        "seeds": {
            "base": seed,
            "streams": match exp.dim() {
                3 => "replica r: arrow stacks seeded with mix_seed(base, r); independent side mix_seed(base ^ 0x1de9e4d3e7, 64 r + gamma index)",
                _ => "replica r at gamma index g: stream r of mix_seed(base, g); independent side stream r of mix_seed(base ^ 0x1de9e4d3e7, g)",
            },
        },
        "estimates": est,
        "fits": { "gap_coupled": gap_fit, "fail_rate": fail_fit, "gap_indep": indep_fit },
        "checks": checks,
    });
    std::fs::write(args.out.with_extension("json"), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    if args.emit_gnuplot_script {
        let name = args.out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let script = format!(
            "set datafile separator ','\nset logscale xy\nset key top left\nset xlabel 'gamma'\n\
             set terminal pngcairo size 800,600\nset output '{stem}.png'\n\
             plot '{name}' every ::1 using 1:3 with linespoints title 'failure rate', \\\n     \
             '{name}' every ::1 using 1:(abs($5)) with linespoints title 'coupled gap'\n",
            stem = args.out.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        );
        std::fs::write(args.out.with_extension("gp"), script)?;
    }
    emit(out, &json!({ "csv": args.out, "estimates": est.len(), "checks": checks, "slope": gap_fit.as_ref().map(|f| f.slope) }))?;
    let ok = checks.height_violations == 0 && checks.union_violations == 0;
    Ok(if ok { Status::Ok } else { Status::AssertionFailed })
}
