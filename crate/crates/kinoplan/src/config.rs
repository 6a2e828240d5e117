//! Flat key = value run configuration.
//!
//! Every module config is reachable through one namespace-dotted key, every
//! key has a documented default, and unknown keys are rejected.
//! A `0` in the fields marked "derived" means "compute from the limits and
//! map resolution"; the concrete formulas live in the accessors.

use std::path::Path;

use nalgebra::Vector3;

use crate::kino_search::SearchConfig;
use crate::replan::{MissionConfig, PipelineConfig};
use crate::time_adjust::TimeAdjustConfig;
use crate::traj_opt::OptimizerConfig;
use crate::voxel_map::{Aabb, ObstacleKind, WorldSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Shared dynamic limits.
    pub v_max: f64,
    pub a_max: f64,
    pub u_max: f64,
    // Map.
    pub resolution: f64,
    /// Worlds are generated at this resolution and conservatively coarsened
    /// to `resolution` when the two differ (resolution-trend rows).
    pub base_resolution: f64,
    pub inflation_radius: f64,
    // World generation.
    pub extent: Vector3<f64>,
    pub obstacles: usize,
    pub kind: ObstacleKind,
    // Search.
    pub input_levels: usize,
    pub tau: f64,
    /// Time weight; 0 = derived as `u_max^2`.
    pub rho: f64,
    /// 0 = derived as `1.5 * resolution`.
    pub goal_tolerance: f64,
    /// 0 = derived as `min(tau/10, resolution/v_max)`.
    pub check_step: f64,
    pub max_expansions: usize,
    // Optimizer.
    pub smooth_weight: f64,
    pub collision_weight: f64,
    pub dynamics_weight: f64,
    pub clearance_threshold: f64,
    pub max_iters: usize,
    pub budget: f64,
    pub grad_tol: f64,
    // Time adjustment.
    pub alpha_v: f64,
    pub alpha_a: f64,
    pub max_rounds: usize,
    // Pipeline.
    /// 0 = derived as `0.3 / v_max` (control-point gaps near 0.3 m).
    pub fit_dt: f64,
    // Mission.
    pub sensing_radius: f64,
    pub replan_period: f64,
    pub tick: f64,
    pub commit_latency: f64,
    pub mission_goal_tolerance: f64,
    pub timeout: f64,
    // Benchmark geometry and seeding.
    pub bench_start: Vector3<f64>,
    pub bench_goal: Vector3<f64>,
    pub clear_margin: f64,
    pub seeds: usize,
    pub base_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            v_max: 3.0,
            a_max: 2.0,
            u_max: 2.0,
            resolution: 0.2,
            base_resolution: 0.2,
            inflation_radius: 0.3,
            extent: Vector3::new(40.0, 40.0, 5.0),
            obstacles: 100,
            kind: ObstacleKind::BoxPillar,
            input_levels: 2,
            tau: 0.5,
            rho: 5.2,
            goal_tolerance: 0.0,
            check_step: 0.0,
            max_expansions: 300_000,
            smooth_weight: 10.0,
            collision_weight: 0.8,
            dynamics_weight: 0.01,
            clearance_threshold: 0.4,
            max_iters: 100,
            budget: 0.05,
            grad_tol: 1e-4,
            alpha_v: 1.1,
            alpha_a: 1.1,
            max_rounds: 50,
            fit_dt: 0.0,
            sensing_radius: 5.0,
            replan_period: 0.5,
            tick: 0.05,
            commit_latency: 0.05,
            mission_goal_tolerance: 0.3,
            timeout: 120.0,
            bench_start: Vector3::new(12.0, 20.0, 2.5),
            bench_goal: Vector3::new(26.0, 20.0, 2.5),
            clear_margin: 1.2,
            seeds: 100,
            base_seed: 1,
        }
    }
}

impl RunConfig {
    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            u_max: self.u_max,
            v_max: self.v_max,
            a_max: self.a_max,
            input_levels: self.input_levels,
            tau: self.tau,
            rho: if self.rho > 0.0 {
                self.rho
            } else {
                self.u_max * self.u_max
            },
            goal_tolerance: if self.goal_tolerance > 0.0 {
                self.goal_tolerance
            } else {
                1.5 * self.resolution
            },
            check_step: if self.check_step > 0.0 {
                self.check_step
            } else {
                (self.tau / 10.0).min(self.resolution / self.v_max)
            },
            max_expansions: self.max_expansions,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            smooth_weight: self.smooth_weight,
            collision_weight: self.collision_weight,
            dynamics_weight: self.dynamics_weight,
            clearance_threshold: self.clearance_threshold,
            v_max: self.v_max,
            a_max: self.a_max,
            max_iters: self.max_iters,
            budget: self.budget,
            grad_tol: self.grad_tol,
        }
    }

    pub fn adjust_config(&self) -> TimeAdjustConfig {
        TimeAdjustConfig {
            v_max: self.v_max,
            a_max: self.a_max,
            alpha_v: self.alpha_v,
            alpha_a: self.alpha_a,
            max_rounds: self.max_rounds,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            search: self.search_config(),
            opt: self.optimizer_config(),
            adjust: self.adjust_config(),
            fit_dt: if self.fit_dt > 0.0 {
                self.fit_dt
            } else {
                0.3 / self.v_max
            },
        }
    }

    pub fn mission_config(&self) -> MissionConfig {
        MissionConfig {
            sensing_radius: self.sensing_radius,
            replan_period: self.replan_period,
            tick: self.tick,
            commit_latency: self.commit_latency,
            goal_tolerance: self.mission_goal_tolerance,
            timeout: self.timeout,
            pipeline: self.pipeline_config(),
        }
    }

    /// Generate one seeded world at the base resolution and coarsen it to
    /// the planning resolution when the two differ.
    pub fn make_world(&self, seed: u64) -> crate::Result<crate::voxel_map::VoxelGrid> {
        let spec = self.world_spec(seed);
        let fine =
            crate::voxel_map::generate_world(&spec, self.base_resolution, self.inflation_radius)?;
        if (self.resolution - self.base_resolution).abs() < 1e-12 {
            return Ok(fine);
        }
        let ratio = self.resolution / self.base_resolution;
        let factor = ratio.round();
        if (ratio - factor).abs() > 1e-9 || factor < 1.0 {
            return Err(crate::Error::Config(format!(
                "map.resolution {} must be an integer multiple of map.base_resolution {}",
                self.resolution, self.base_resolution
            )));
        }
        fine.coarsen(factor as usize)
    }

    /// World spec for one benchmark seed: the configured world with the
    /// start/goal margin boxes kept free.
    pub fn world_spec(&self, seed: u64) -> WorldSpec {
        WorldSpec {
            extent: self.extent,
            obstacle_count: self.obstacles,
            obstacle_kind: self.kind,
            seed,
            clear_regions: vec![
                Aabb::around(&self.bench_start, self.clear_margin),
                Aabb::around(&self.bench_goal, self.clear_margin),
            ],
        }
    }

    /// `key=value` override, same keys as the config file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let scalar = || -> Result<f64> {
            value
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("{key}: bad number {value:?}: {e}")))
        };
        let integer = || -> Result<usize> {
            value
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("{key}: bad integer {value:?}: {e}")))
        };
        let vec3 = || -> Result<Vector3<f64>> {
            let parts: Vec<&str> = value.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!(
                    "{key}: expected 3 numbers, got {value:?}"
                )));
            }
            let mut out = Vector3::zeros();
            for (i, p) in parts.iter().enumerate() {
                out[i] = p
                    .parse()
                    .map_err(|e| Error::Config(format!("{key}: bad number {p:?}: {e}")))?;
            }
            Ok(out)
        };
        match key {
            "v_max" => self.v_max = scalar()?,
            "a_max" => self.a_max = scalar()?,
            "u_max" => self.u_max = scalar()?,
            "map.resolution" => self.resolution = scalar()?,
            "map.base_resolution" => self.base_resolution = scalar()?,
            "map.inflation_radius" => self.inflation_radius = scalar()?,
            "world.extent" => self.extent = vec3()?,
            "world.obstacles" => self.obstacles = integer()?,
            "world.kind" => {
                self.kind = match value.trim() {
                    "pillars" => ObstacleKind::BoxPillar,
                    "walls" => ObstacleKind::WallWithHole,
                    other => {
                        return Err(Error::Config(format!(
                            "world.kind: expected pillars|walls, got {other:?}"
                        )))
                    }
                }
            }
            "search.input_levels" => self.input_levels = integer()?,
            "search.tau" => self.tau = scalar()?,
            "search.rho" => self.rho = scalar()?,
            "search.goal_tolerance" => self.goal_tolerance = scalar()?,
            "search.check_step" => self.check_step = scalar()?,
            "search.max_expansions" => self.max_expansions = integer()?,
            "opt.smooth_weight" => self.smooth_weight = scalar()?,
            "opt.collision_weight" => self.collision_weight = scalar()?,
            "opt.dynamics_weight" => self.dynamics_weight = scalar()?,
            "opt.clearance_threshold" => self.clearance_threshold = scalar()?,
            "opt.max_iters" => self.max_iters = integer()?,
            "opt.budget" => self.budget = scalar()?,
            "opt.grad_tol" => self.grad_tol = scalar()?,
            "adjust.alpha_v" => self.alpha_v = scalar()?,
            "adjust.alpha_a" => self.alpha_a = scalar()?,
            "adjust.max_rounds" => self.max_rounds = integer()?,
            "pipeline.fit_dt" => self.fit_dt = scalar()?,
            "mission.sensing_radius" => self.sensing_radius = scalar()?,
            "mission.replan_period" => self.replan_period = scalar()?,
            "mission.tick" => self.tick = scalar()?,
            "mission.commit_latency" => self.commit_latency = scalar()?,
            "mission.goal_tolerance" => self.mission_goal_tolerance = scalar()?,
            "mission.timeout" => self.timeout = scalar()?,
            "bench.start" => self.bench_start = vec3()?,
            "bench.goal" => self.bench_goal = vec3()?,
            "bench.clear_margin" => self.clear_margin = scalar()?,
            "bench.seeds" => self.seeds = integer()?,
            "bench.base_seed" => {
                self.base_seed = value
                    .trim()
                    .parse()
                    .map_err(|e| Error::Config(format!("{key}: bad seed {value:?}: {e}")))?
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let v3 = |v: &Vector3<f64>| format!("{} {} {}", v.x, v.y, v.z);
        vec![
            ("v_max", self.v_max.to_string()),
            ("a_max", self.a_max.to_string()),
            ("u_max", self.u_max.to_string()),
            ("map.resolution", self.resolution.to_string()),
            ("map.base_resolution", self.base_resolution.to_string()),
            ("map.inflation_radius", self.inflation_radius.to_string()),
            ("world.extent", v3(&self.extent)),
            ("world.obstacles", self.obstacles.to_string()),
            (
                "world.kind",
                match self.kind {
                    ObstacleKind::BoxPillar => "pillars".to_string(),
                    ObstacleKind::WallWithHole => "walls".to_string(),
                },
            ),
            ("search.input_levels", self.input_levels.to_string()),
            ("search.tau", self.tau.to_string()),
            ("search.rho", self.rho.to_string()),
            ("search.goal_tolerance", self.goal_tolerance.to_string()),
            ("search.check_step", self.check_step.to_string()),
            ("search.max_expansions", self.max_expansions.to_string()),
            ("opt.smooth_weight", self.smooth_weight.to_string()),
            ("opt.collision_weight", self.collision_weight.to_string()),
            ("opt.dynamics_weight", self.dynamics_weight.to_string()),
            (
                "opt.clearance_threshold",
                self.clearance_threshold.to_string(),
            ),
            ("opt.max_iters", self.max_iters.to_string()),
            ("opt.budget", self.budget.to_string()),
            ("opt.grad_tol", self.grad_tol.to_string()),
            ("adjust.alpha_v", self.alpha_v.to_string()),
            ("adjust.alpha_a", self.alpha_a.to_string()),
            ("adjust.max_rounds", self.max_rounds.to_string()),
            ("pipeline.fit_dt", self.fit_dt.to_string()),
            ("mission.sensing_radius", self.sensing_radius.to_string()),
            ("mission.replan_period", self.replan_period.to_string()),
            ("mission.tick", self.tick.to_string()),
            ("mission.commit_latency", self.commit_latency.to_string()),
            (
                "mission.goal_tolerance",
                self.mission_goal_tolerance.to_string(),
            ),
            ("mission.timeout", self.timeout.to_string()),
            ("bench.start", v3(&self.bench_start)),
            ("bench.goal", v3(&self.bench_goal)),
            ("bench.clear_margin", self.clear_margin.to_string()),
            ("bench.seeds", self.seeds.to_string()),
            ("bench.base_seed", self.base_seed.to_string()),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::from("# kinoplan run configuration\n");
        for (key, value) in self.entries() {
            text.push_str(key);
            text.push_str(" = ");
            text.push_str(&value);
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }
}
