//! Command-line front end: world generation, single-shot planning,
//! statistics runs over seeded random worlds, and mission simulation.
//!
//! Exit codes: 0 success, 2 search failure, 3 optimizer fallback used,
//! 4 infeasible after time adjustment, 5 mission failure (1 for usage and
//! I/O errors).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::Vector3;

use crate::config::RunConfig;
use crate::distance_field::DistanceField;
use crate::kino_search::State;
use crate::replan::{self, MissionLog, PlanOutput, ScriptedReveal};
use crate::traj_opt;
use crate::voxel_map::VoxelGrid;
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_SEARCH_FAILURE: i32 = 2;
pub const EXIT_FALLBACK: i32 = 3;
pub const EXIT_INFEASIBLE: i32 = 4;
pub const EXIT_MISSION_FAILURE: i32 = 5;

#[derive(Parser)]
#[command(
    name = "kinoplan",
    about = "Kinodynamic planning toolkit for a 3-D double integrator in voxel worlds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded random world and save it as a map file.
    Gen {
        /// World extent in meters, x y z.
        #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"])]
        extent: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        obstacles: usize,
        /// Voxel resolution in meters.
        #[arg(long, default_value_t = 0.2)]
        res: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// pillars | walls
        #[arg(long, default_value = "pillars")]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Per-field override, key=value; repeatable.
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Plan once on a map file and export every pipeline stage.
    Plan {
        #[arg(long)]
        map: PathBuf,
        /// Start state: x y z [vx vy vz].
        #[arg(long, num_args = 3..=6, allow_negative_numbers = true)]
        start: Vec<f64>,
        /// Goal state: x y z [vx vy vz].
        #[arg(long, num_args = 3..=6, allow_negative_numbers = true)]
        goal: Vec<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Statistics over seeded random worlds (search + optimization rows).
    Bench {
        #[arg(long)]
        seeds: Option<usize>,
        /// Base seed; instance i uses base + i.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Run a receding-horizon mission from a scenario file.
    Mission {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
}

/// Entry point for the `kinoplan` binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Search(_) => EXIT_SEARCH_FAILURE,
                _ => EXIT_USAGE,
            }
        }
    }
}

fn load_config(path: &Option<PathBuf>, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in sets {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {s:?}")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Gen {
            extent,
            obstacles,
            res,
            seed,
            kind,
            out,
            config,
            sets,
        } => {
            let mut cfg = load_config(&config, &sets)?;
            cfg.extent = Vector3::new(extent[0], extent[1], extent[2]);
            cfg.obstacles = obstacles;
            cfg.resolution = res;
            cfg.base_resolution = res;
            cfg.set("world.kind", &kind)?;
            cmd_gen(&cfg, seed, &out)
        }
        Command::Plan {
            map,
            start,
            goal,
            out,
            config,
            sets,
        } => {
            let cfg = load_config(&config, &sets)?;
            cmd_plan(
                &cfg,
                &map,
                &parse_state(&start)?,
                &parse_state(&goal)?,
                &out,
            )
        }
        Command::Bench {
            seeds,
            seed,
            out,
            config,
            sets,
        } => {
            let mut cfg = load_config(&config, &sets)?;
            if let Some(n) = seeds {
                cfg.seeds = n;
            }
            if let Some(s) = seed {
                cfg.base_seed = s;
            }
            cmd_bench(&cfg, &out)
        }
        Command::Mission {
            scenario,
            out,
            config,
            sets,
        } => {
            let cfg = load_config(&config, &sets)?;
            cmd_mission(&cfg, &scenario, &out)
        }
    }
}

fn parse_state(values: &[f64]) -> Result<State> {
    match values.len() {
        3 => Ok(State::at_rest(Vector3::new(
            values[0], values[1], values[2],
        ))),
        6 => Ok(State::new(
            Vector3::new(values[0], values[1], values[2]),
            Vector3::new(values[3], values[4], values[5]),
        )),
        n => Err(Error::Config(format!(
            "state needs 3 or 6 numbers, got {n}"
        ))),
    }
}

pub fn cmd_gen(cfg: &RunConfig, seed: u64, out: &Path) -> Result<i32> {
    let grid = cfg.make_world(seed)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    grid.save(out)?;
    let total = grid.dims().iter().product::<usize>();
    println!(
        "world {}x{}x{} voxels at {} m, {} occupied ({:.2}%), written to {}",
        grid.dims()[0],
        grid.dims()[1],
        grid.dims()[2],
        grid.resolution(),
        grid.occupied_count(),
        100.0 * grid.occupied_count() as f64 / total as f64,
        out.display()
    );
    Ok(EXIT_OK)
}

/// Plan once over a fully known map. Writes the searched path, the optimized
/// and the adjusted trajectories (JSON + CSV), stage timings and the cost
/// trace into `out`.
pub fn cmd_plan(
    cfg: &RunConfig,
    map_path: &Path,
    start: &State,
    goal: &State,
    out: &Path,
) -> Result<i32> {
    let raw = VoxelGrid::load(map_path)?;
    let inflated = raw.inflate();
    let field = DistanceField::build_capped(&inflated, 10.0 * cfg.clearance_threshold);
    let pipeline = cfg.pipeline_config();

    let plan = replan::plan_local(&inflated, &field, start, goal, &pipeline, None)?;
    write_plan_outputs(&plan, out)?;

    println!(
        "search {:.2} ms ({} expansions), optimize {:.2} ms, adjust {:.2} ms ({} rounds)",
        plan.timings.search_s * 1e3,
        plan.search.expansions,
        plan.timings.optimize_s * 1e3,
        plan.timings.adjust_s * 1e3,
        plan.adjust_rounds,
    );
    println!(
        "duration {:.3} s, control cost {:.3}, fallback: {}, feasible: {}",
        plan.final_trajectory.duration(),
        plan.search.control_cost,
        plan.used_fallback,
        plan.adjust_feasible
    );
    if !plan.adjust_feasible {
        return Ok(EXIT_INFEASIBLE);
    }
    if plan.used_fallback {
        return Ok(EXIT_FALLBACK);
    }
    Ok(EXIT_OK)
}

fn write_plan_outputs(plan: &PlanOutput, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("search.json"),
        serde_json::to_string_pretty(&plan.search)?,
    )?;
    std::fs::write(out.join("initial.json"), plan.initial.to_json()?)?;
    std::fs::write(out.join("optimized.json"), plan.optimized.to_json()?)?;
    std::fs::write(out.join("final.json"), plan.final_trajectory.to_json()?)?;
    plan.optimized.write_csv(&out.join("optimized.csv"), 0.02)?;
    plan.final_trajectory
        .write_csv(&out.join("final.csv"), 0.02)?;
    traj_opt::write_trace_csv(&plan.trace, &out.join("trace.csv"))?;
    std::fs::write(
        out.join("timings.json"),
        serde_json::to_string_pretty(&plan.timings)?,
    )?;
    Ok(())
}

/// One benchmark instance. Wall times live in a separate struct so result
/// files stay bit-deterministic across runs.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchRow {
    pub seed: u64,
    pub success: bool,
    pub failure: Option<String>,
    pub expansions: usize,
    pub traj_duration: f64,
    pub control_cost: f64,
    pub jerk_initial: f64,
    pub jerk_optimized: f64,
    pub adjust_rounds: usize,
    pub adjust_feasible: bool,
    pub used_fallback: bool,
    /// Final over initial total optimizer cost.
    pub cost_ratio: f64,
    /// First iteration at which the total cost dropped below a tenth of the
    /// initial value.
    pub iters_to_tenth: Option<usize>,
    /// Convergence normalized to the run's own floor, evaluated at
    /// iteration 100: `(f(100) - min f) / (f(0) - min f)`. Meaningful when
    /// the run's iteration cap exceeds 100.
    pub norm_cost_at_100: f64,
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct BenchTiming {
    pub seed: u64,
    pub search_s: f64,
    pub optimize_s: f64,
    pub adjust_s: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub timings: Vec<BenchTiming>,
}

#[derive(Debug, Clone, Copy)]
pub struct Stats {
    pub mean: f64,
    pub max: f64,
    pub std: f64,
}

pub fn stats_of(values: impl Iterator<Item = f64> + Clone) -> Stats {
    let n = values.clone().count();
    if n == 0 {
        return Stats {
            mean: f64::NAN,
            max: f64::NAN,
            std: f64::NAN,
        };
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Stats {
        mean,
        max,
        std: var.sqrt(),
    }
}

impl BenchReport {
    pub fn success_rate(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.success).count() as f64 / self.rows.len() as f64
    }

    pub fn successes(&self) -> impl Iterator<Item = &BenchRow> + Clone {
        self.rows.iter().filter(|r| r.success)
    }

    pub fn search_time_stats(&self) -> Stats {
        let ok: Vec<u64> = self.successes().map(|r| r.seed).collect();
        stats_of(
            self.timings
                .iter()
                .filter(|t| ok.contains(&t.seed))
                .map(|t| t.search_s)
                .collect::<Vec<_>>()
                .into_iter(),
        )
    }
}

/// Run the statistics harness: one global plan per seeded world.
pub fn run_bench(cfg: &RunConfig) -> Result<BenchReport> {
    if cfg.seeds < 10 {
        return Err(Error::Config(format!(
            "bench needs at least 10 seeds, got {}",
            cfg.seeds
        )));
    }
    let pipeline = cfg.pipeline_config();
    let start = State::at_rest(cfg.bench_start);
    let goal = State::at_rest(cfg.bench_goal);

    let mut rows = Vec::with_capacity(cfg.seeds);
    let mut timings = Vec::with_capacity(cfg.seeds);
    for i in 0..cfg.seeds {
        let seed = cfg.base_seed.wrapping_add(i as u64);
        let raw = cfg.make_world(seed)?;
        let inflated = raw.inflate();
        let field = DistanceField::build_capped(&inflated, 10.0 * cfg.clearance_threshold);

        match replan::plan_local(&inflated, &field, &start, &goal, &pipeline, None) {
            Ok(plan) => {
                let initial_total = plan.trace.first().map(|t| t.total).unwrap_or(0.0);
                let final_total = plan.trace.last().map(|t| t.total).unwrap_or(0.0);
                let cost_ratio = if initial_total > 0.0 {
                    final_total / initial_total
                } else {
                    0.0
                };
                let iters_to_tenth = plan
                    .trace
                    .iter()
                    .find(|t| t.total <= 0.1 * initial_total)
                    .map(|t| t.iter);
                let floor = plan
                    .trace
                    .iter()
                    .map(|t| t.total)
                    .fold(f64::INFINITY, f64::min);
                let at_100 = plan
                    .trace
                    .iter()
                    .take_while(|t| t.iter <= 100)
                    .last()
                    .map(|t| t.total)
                    .unwrap_or(initial_total);
                let norm_cost_at_100 = if initial_total - floor > 1e-12 {
                    (at_100 - floor) / (initial_total - floor)
                } else {
                    0.0
                };
                rows.push(BenchRow {
                    seed,
                    success: true,
                    failure: None,
                    expansions: plan.search.expansions,
                    traj_duration: plan.search.duration,
                    control_cost: plan.search.control_cost,
                    jerk_initial: plan.initial.squared_jerk_integral()?,
                    jerk_optimized: plan.optimized.squared_jerk_integral()?,
                    adjust_rounds: plan.adjust_rounds,
                    adjust_feasible: plan.adjust_feasible,
                    used_fallback: plan.used_fallback,
                    cost_ratio,
                    iters_to_tenth,
                    norm_cost_at_100,
                });
                timings.push(BenchTiming {
                    seed,
                    search_s: plan.timings.search_s,
                    optimize_s: plan.timings.optimize_s,
                    adjust_s: plan.timings.adjust_s,
                });
            }
            Err(err) => {
                rows.push(BenchRow {
                    seed,
                    success: false,
                    failure: Some(err.to_string()),
                    expansions: 0,
                    traj_duration: 0.0,
                    control_cost: 0.0,
                    jerk_initial: 0.0,
                    jerk_optimized: 0.0,
                    adjust_rounds: 0,
                    adjust_feasible: false,
                    used_fallback: false,
                    cost_ratio: 0.0,
                    iters_to_tenth: None,
                    norm_cost_at_100: f64::NAN,
                });
            }
        }
    }
    Ok(BenchReport { rows, timings })
}

pub fn write_bench_csv(report: &BenchReport, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut text = String::from(
        "seed,success,expansions,traj_duration,control_cost,jerk_initial,jerk_optimized,adjust_rounds,used_fallback,cost_ratio,iters_to_tenth,norm_cost_at_100\n",
    );
    for r in &report.rows {
        writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.success,
            r.expansions,
            r.traj_duration,
            r.control_cost,
            r.jerk_initial,
            r.jerk_optimized,
            r.adjust_rounds,
            r.used_fallback,
            r.cost_ratio,
            r.iters_to_tenth.map(|i| i.to_string()).unwrap_or_default(),
            r.norm_cost_at_100
        )
        .expect("string write");
    }
    std::fs::write(out.join("bench_results.csv"), text)?;

    let mut timing = String::from("seed,search_s,optimize_s,adjust_s\n");
    for t in &report.timings {
        writeln!(
            timing,
            "{},{},{},{}",
            t.seed, t.search_s, t.optimize_s, t.adjust_s
        )
        .expect("string write");
    }
    std::fs::write(out.join("bench_timing.csv"), timing)?;
    Ok(())
}

pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let report = run_bench(cfg)?;
    write_bench_csv(&report, out)?;

    let dur = stats_of(
        report
            .successes()
            .map(|r| r.traj_duration)
            .collect::<Vec<_>>()
            .into_iter(),
    );
    let ctrl = stats_of(
        report
            .successes()
            .map(|r| r.control_cost)
            .collect::<Vec<_>>()
            .into_iter(),
    );
    let jerk = stats_of(
        report
            .successes()
            .map(|r| r.jerk_optimized)
            .collect::<Vec<_>>()
            .into_iter(),
    );
    let time = report.search_time_stats();
    println!(
        "instances: {}   success rate: {:.1}%",
        report.rows.len(),
        100.0 * report.success_rate()
    );
    println!("                      mean        max        std");
    println!(
        "search time (ms) {:>9.3} {:>10.3} {:>10.3}",
        time.mean * 1e3,
        time.max * 1e3,
        time.std * 1e3
    );
    println!(
        "traj time (s)    {:>9.3} {:>10.3} {:>10.3}",
        dur.mean, dur.max, dur.std
    );
    println!(
        "ctrl cost        {:>9.3} {:>10.3} {:>10.3}",
        ctrl.mean, ctrl.max, ctrl.std
    );
    println!(
        "jerk^2 integral  {:>9.3} {:>10.3} {:>10.3}",
        jerk.mean, jerk.max, jerk.std
    );
    println!("results: {}", out.join("bench_results.csv").display());
    Ok(EXIT_OK)
}

/// A mission scenario: the world (a map file or an inline seeded spec),
/// start and goal states, and scripted obstacle appearances.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub world: VoxelGrid,
    pub start: State,
    pub goal: State,
    pub reveals: Vec<ScriptedReveal>,
}

/// Parse a scenario file. Lines: `map = PATH` (relative to the scenario
/// file) or `world = x y z obstacles seed`, `start = x y z [vx vy vz]`,
/// `goal = ...`, and zero or more
/// `reveal = t minx miny minz maxx maxy maxz`.
pub fn parse_scenario(path: &Path, cfg: &RunConfig) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut world = None;
    let mut start = None;
    let mut goal = None;
    let mut reveals = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Scenario(format!("line {}: expected key = value", lineno + 1)))?;
        let key = key.trim();
        let nums = || -> Result<Vec<f64>> {
            value
                .split_whitespace()
                .map(|t| {
                    t.parse().map_err(|e| {
                        Error::Scenario(format!("line {}: bad number {t:?}: {e}", lineno + 1))
                    })
                })
                .collect()
        };
        match key {
            "map" => {
                world = Some(VoxelGrid::load(&dir.join(value.trim()))?);
            }
            "world" => {
                let v = nums()?;
                if v.len() != 5 {
                    return Err(Error::Scenario(format!(
                        "line {}: world needs `x y z obstacles seed`",
                        lineno + 1
                    )));
                }
                let mut wc = cfg.clone();
                wc.extent = Vector3::new(v[0], v[1], v[2]);
                wc.obstacles = v[3] as usize;
                world = Some(wc.make_world(v[4] as u64)?);
            }
            "start" => start = Some(parse_state(&nums()?)?),
            "goal" => goal = Some(parse_state(&nums()?)?),
            "reveal" => {
                let v = nums()?;
                if v.len() != 7 {
                    return Err(Error::Scenario(format!(
                        "line {}: reveal needs `t minx miny minz maxx maxy maxz`",
                        lineno + 1
                    )));
                }
                reveals.push(ScriptedReveal {
                    time: v[0],
                    min: Vector3::new(v[1], v[2], v[3]),
                    max: Vector3::new(v[4], v[5], v[6]),
                });
            }
            other => {
                return Err(Error::Scenario(format!(
                    "line {}: unknown scenario key {other:?}",
                    lineno + 1
                )))
            }
        }
    }

    Ok(Scenario {
        world: world.ok_or_else(|| Error::Scenario("scenario needs a map or world line".into()))?,
        start: start.ok_or_else(|| Error::Scenario("scenario needs a start line".into()))?,
        goal: goal.ok_or_else(|| Error::Scenario("scenario needs a goal line".into()))?,
        reveals,
    })
}

pub fn write_mission_outputs(log: &MissionLog, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("mission.json"), serde_json::to_string_pretty(log)?)?;
    let mut csv = String::from("t,x,y,z,vx,vy,vz\n");
    for (t, s) in &log.executed {
        writeln!(
            csv,
            "{t},{},{},{},{},{},{}",
            s.position.x, s.position.y, s.position.z, s.velocity.x, s.velocity.y, s.velocity.z
        )
        .expect("string write");
    }
    std::fs::write(out.join("executed.csv"), csv)?;
    Ok(())
}

pub fn cmd_mission(cfg: &RunConfig, scenario_path: &Path, out: &Path) -> Result<i32> {
    let scenario = parse_scenario(scenario_path, cfg)?;
    let mission_cfg = cfg.mission_config();
    let log = replan::run_mission(
        &scenario.world,
        scenario.start,
        scenario.goal,
        &mission_cfg,
        &scenario.reveals,
    )?;
    write_mission_outputs(&log, out)?;
    println!(
        "mission {}: {} plans ({} collision-triggered, {} periodic), {:.1} s elapsed",
        if log.success { "succeeded" } else { "FAILED" },
        log.replans.len(),
        log.collision_triggers,
        log.periodic_triggers,
        log.elapsed
    );
    println!(
        "audit: {} samples, {} collisions, max handoff jump {:.2e} m",
        log.audit_samples, log.audit_collisions, log.max_position_jump
    );
    if !log.success {
        if let Some(reason) = &log.failure_reason {
            println!("reason: {reason}");
        }
        return Ok(EXIT_MISSION_FAILURE);
    }
    Ok(EXIT_OK)
}
