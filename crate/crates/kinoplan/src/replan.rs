//! Receding-horizon mission simulator.
//!
//! The simulator reveals the true world inside a sensing sphere around the
//! robot, plans within the known space only, and replans when the current
//! trajectory collides with newly revealed obstacles or periodically when new
//! information has arrived. Tracking is perfect: the robot state is the
//! trajectory evaluated at the mission clock, so the log measures planner
//! quality alone. Plans commit one latency window after their trigger so
//! planning computation has a deadline; the latency rounds up to a whole
//! number of ticks, which keeps handoffs exactly on tick boundaries.

use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::bspline::{self, BSplineTrajectory};
use crate::distance_field::DistanceField;
use crate::kino_search::{self, Horizon, SearchConfig, SearchResult, State};
use crate::time_adjust::{self, TimeAdjustConfig};
use crate::traj_opt::{self, OptimizerConfig, TracePoint};
use crate::voxel_map::{GridIndex, VoxelGrid};
use crate::Result;

/// Everything the three-stage pipeline needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub search: SearchConfig,
    pub opt: OptimizerConfig,
    pub adjust: TimeAdjustConfig,
    /// Sampling step for fitting the initial spline to the searched path;
    /// also the knot span, so time allocation inherits the search's profile.
    pub fit_dt: f64,
}

impl PipelineConfig {
    /// Defaults for a map of the given resolution. The fit step keeps
    /// control-point gaps near 0.3 m at full speed: small enough for workable
    /// hull certificates, coarse enough that the spline cannot ring at the
    /// primitive switching scale.
    pub fn for_resolution(resolution: f64) -> Self {
        let search = SearchConfig::for_resolution(resolution);
        let opt = OptimizerConfig {
            v_max: search.v_max,
            a_max: search.a_max,
            ..OptimizerConfig::default()
        };
        let adjust = TimeAdjustConfig {
            v_max: search.v_max,
            a_max: search.a_max,
            ..TimeAdjustConfig::default()
        };
        let fit_dt = 0.3 / search.v_max;
        PipelineConfig {
            search,
            opt,
            adjust,
            fit_dt,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageTimings {
    pub search_s: f64,
    pub optimize_s: f64,
    pub adjust_s: f64,
}

/// Output of one full pipeline run.
#[derive(Debug, Clone)]
pub struct PlanOutput {
    pub search: SearchResult,
    /// Uniform spline fitted to the searched path.
    pub initial: BSplineTrajectory,
    /// After gradient refinement.
    pub optimized: BSplineTrajectory,
    /// After time adjustment; what the robot executes.
    pub final_trajectory: BSplineTrajectory,
    /// The optimized spline failed a hull certificate, so the unoptimized
    /// fit was adjusted and returned instead.
    pub used_fallback: bool,
    pub adjust_feasible: bool,
    pub adjust_rounds: usize,
    pub trace: Vec<TracePoint>,
    pub timings: StageTimings,
}

/// Search, fit, optimize, certify, adjust. With a horizon, the search stops
/// at the sensing-sphere boundary and plans to a local goal when the global
/// one is out of reach.
pub fn plan_local(
    map: &VoxelGrid,
    field: &DistanceField,
    start: &State,
    goal: &State,
    cfg: &PipelineConfig,
    horizon: Option<&Horizon>,
) -> Result<PlanOutput> {
    let t0 = Instant::now();
    let search = match horizon {
        Some(hz) => kino_search::search_local(start, goal, map, &cfg.search, hz)?,
        None => kino_search::search(start, goal, map, &cfg.search)?,
    };
    let search_s = t0.elapsed().as_secs_f64();

    if search.duration <= 0.0 {
        return Err(crate::Error::Fit(
            "searched path has zero duration; nothing to fit".into(),
        ));
    }

    // At least 4 samples for the fit, at spacing no coarser than fit_dt.
    let samples = search.sample(cfg.fit_dt.min(search.duration / 3.0));
    let dt = samples[1].0 - samples[0].0;
    let initial = bspline::fit_from_samples(&samples, dt, (&search.start, &search.end))?;

    let t1 = Instant::now();
    let outcome = traj_opt::optimize(&initial, field, &cfg.opt)?;
    let optimize_s = t1.elapsed().as_secs_f64();

    let optimized = outcome.trajectory;
    let unsafe_hulls = bspline::check_hull_safety(&optimized, field)
        .iter()
        .any(|v| !v.safe);
    let (chosen, used_fallback) = if unsafe_hulls {
        (initial.clone(), true)
    } else {
        (optimized.clone(), false)
    };

    // Time adjustment may stretch spans near the domain start, which would
    // move the handoff state the robot is about to fly from. Alternate
    // adjustment with start re-anchoring until the profiles are feasible and
    // the start state is reproduced exactly.
    let t2 = Instant::now();
    let mut current = chosen;
    let mut adjust_rounds = 0;
    let mut adjust_feasible = true;
    for _pass in 0..8 {
        let adjusted = time_adjust::adjust(&current, &cfg.adjust)?;
        adjust_rounds += adjusted.rounds;
        adjust_feasible = adjusted.feasible;
        if adjusted.rounds == 0 {
            current = adjusted.trajectory;
            break;
        }
        current = anchor_start(&adjusted.trajectory, &search.start)?;
    }
    let (v_left, a_left) = time_adjust::find_infeasible(&current, &cfg.adjust)?;
    adjust_feasible = adjust_feasible && v_left.is_empty() && a_left.is_empty();
    let adjust_s = t2.elapsed().as_secs_f64();

    Ok(PlanOutput {
        search,
        initial,
        optimized,
        final_trajectory: current,
        used_fallback,
        adjust_feasible,
        adjust_rounds,
        trace: outcome.trace,
        timings: StageTimings {
            search_s,
            optimize_s,
            adjust_s,
        },
    })
}

/// Minimal rewrite of the first `p` control points so the spline reproduces
/// `target` (position and velocity) at its domain start under the current
/// knot vector. Needed because knot-span stretches near the start otherwise
/// shift the handoff state. Acceleration is left free: a double integrator's
/// input may step, and pinning it would fight the very slowdown the
/// adjustment is applying. The least-norm correction is the size of the
/// drift (millimeters) and confined to the first curve segments.
fn anchor_start(traj: &BSplineTrajectory, target: &State) -> Result<BSplineTrajectory> {
    let p = traj.degree();
    assert_eq!(p, 3, "anchoring is written for the cubic pipeline");
    let lo = traj.domain().0;
    let q = traj.control_points();

    // Basis values N_i^(k)(lo) for the first p+1 control points, extracted
    // by evaluating the spline with indicator control points.
    let mut basis = [[0.0f64; 4]; 2]; // [order][slot]
    for slot in 0..=p {
        let mut unit: Vec<Vector3<f64>> = vec![Vector3::zeros(); q.len()];
        unit[slot] = Vector3::new(1.0, 0.0, 0.0);
        let probe = traj.with_control_points(unit)?;
        for (order, row) in basis.iter_mut().enumerate() {
            row[slot] = probe.eval(lo, order)?.x;
        }
    }

    // Constraints A x = b on x = (Q0, Q1, Q2) per axis; take the
    // minimum-norm correction x = x0 + A^T (A A^T)^-1 (b - A x0).
    let a = nalgebra::Matrix2x3::new(
        basis[0][0],
        basis[0][1],
        basis[0][2],
        basis[1][0],
        basis[1][1],
        basis[1][2],
    );
    let gram = a * a.transpose();
    let gram_inv = gram
        .try_inverse()
        .ok_or_else(|| crate::Error::InvalidSpline("degenerate start anchoring system".into()))?;

    let targets = [target.position, target.velocity];
    let mut new_points = q.to_vec();
    for axis in 0..3 {
        let x0 = nalgebra::Vector3::new(q[0][axis], q[1][axis], q[2][axis]);
        let b = nalgebra::Vector2::new(
            targets[0][axis] - basis[0][3] * q[3][axis],
            targets[1][axis] - basis[1][3] * q[3][axis],
        );
        let x = x0 + a.transpose() * gram_inv * (b - a * x0);
        for i in 0..3 {
            new_points[i][axis] = x[i];
        }
    }
    traj.with_control_points(new_points)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MissionConfig {
    pub sensing_radius: f64,
    pub replan_period: f64,
    pub tick: f64,
    /// Wall between triggering a plan and handing it over; rounds up to a
    /// whole number of ticks.
    pub commit_latency: f64,
    pub goal_tolerance: f64,
    pub timeout: f64,
    pub pipeline: PipelineConfig,
}

impl MissionConfig {
    pub fn for_resolution(resolution: f64) -> Self {
        MissionConfig {
            sensing_radius: 5.0,
            replan_period: 0.5,
            tick: 0.05,
            commit_latency: 0.05,
            goal_tolerance: 0.3,
            timeout: 120.0,
            pipeline: PipelineConfig::for_resolution(resolution),
        }
    }
}

/// A box of the true world that becomes occupied at a scripted time,
/// modelling an obstacle the map did not contain when the mission started.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptedReveal {
    pub time: f64,
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriggerReason {
    /// No trajectory yet (mission start, or the previous one was fully
    /// executed short of the global goal).
    Initial,
    /// The remaining trajectory crosses a known-occupied voxel.
    Collision,
    /// The replan period elapsed with new map information available.
    Periodic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplanRecord {
    pub time: f64,
    pub reason: TriggerReason,
    pub ok: bool,
    pub failure: Option<String>,
    pub timings: Option<StageTimings>,
    pub expansions: usize,
    pub used_fallback: bool,
    pub trajectory_duration: f64,
    pub position_jump: f64,
    pub velocity_jump: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MissionLog {
    pub success: bool,
    pub failure_reason: Option<String>,
    pub elapsed: f64,
    pub replans: Vec<ReplanRecord>,
    pub collision_triggers: usize,
    pub periodic_triggers: usize,
    /// Executed states sampled at the collision-check step.
    pub executed: Vec<(f64, State)>,
    pub audit_samples: usize,
    /// Executed samples inside occupied voxels of the true world. Zero on a
    /// correct run.
    pub audit_collisions: usize,
    pub max_position_jump: f64,
    pub max_velocity_jump: f64,
    pub plan_wall_time_total: f64,
}

struct ActivePlan {
    trajectory: BSplineTrajectory,
    /// Mission clock at the trajectory's domain start.
    t0: f64,
    end_state: State,
    /// The trajectory ends at the global goal (not a horizon-local one).
    ends_at_goal: bool,
}

impl ActivePlan {
    fn state_at_clock(&self, clock: f64) -> State {
        let (lo, hi) = self.trajectory.domain();
        let t = clock - self.t0 + lo;
        if t >= hi {
            // Fully executed: hover at the end point.
            return State::at_rest(self.end_state.position);
        }
        let t = t.max(lo);
        self.trajectory.state_at(t).expect("in-domain evaluation")
    }

    fn finished(&self, clock: f64) -> bool {
        clock - self.t0 >= self.trajectory.duration()
    }
}

/// The mission simulator. Construction reveals nothing; the first tick
/// senses and plans.
pub struct Mission {
    true_world: VoxelGrid,
    known_raw: VoxelGrid,
    known_inflated: VoxelGrid,
    field: DistanceField,
    cfg: MissionConfig,
    goal: State,
    clock: f64,
    robot: State,
    active: Option<ActivePlan>,
    pending: Option<(f64, PlanOutput)>,
    plans_made: usize,
    last_plan_time: f64,
    map_changed_since_plan: bool,
    reveals: Vec<ScriptedReveal>,
}

impl Mission {
    pub fn new(
        true_world: VoxelGrid,
        start: State,
        goal: State,
        cfg: MissionConfig,
        reveals: Vec<ScriptedReveal>,
    ) -> Result<Self> {
        let known_raw = VoxelGrid::new(
            true_world.origin(),
            true_world.resolution(),
            true_world.dims(),
            true_world.inflation_radius(),
        )?;
        let known_inflated = known_raw.clone();
        let cap = 10.0 * cfg.pipeline.opt.clearance_threshold;
        let field = DistanceField::build_capped(&known_inflated, cap);
        Ok(Mission {
            true_world,
            known_raw,
            known_inflated,
            field,
            cfg,
            goal,
            clock: 0.0,
            robot: start,
            active: None,
            pending: None,
            plans_made: 0,
            last_plan_time: f64::NEG_INFINITY,
            map_changed_since_plan: false,
            reveals,
        })
    }

    pub fn known_world(&self) -> &VoxelGrid {
        &self.known_raw
    }

    /// Reveal all true-occupied voxels with centers within the sensing
    /// radius of the robot. Returns the newly revealed raw voxels and folds
    /// their inflation into the known map and the distance field.
    pub fn sense(&mut self) -> Vec<GridIndex> {
        let center = self.robot.position;
        let r = self.cfg.sensing_radius;
        let r2 = r * r;
        let lo = center - Vector3::repeat(r);
        let hi = center + Vector3::repeat(r);
        let dims = self.true_world.dims();
        let res = self.true_world.resolution();
        let origin = self.true_world.origin();

        let mut newly = Vec::new();
        let clamp_idx = |v: f64, n: usize| -> usize {
            if v < 0.0 {
                0
            } else {
                (v as usize).min(n - 1)
            }
        };
        let ilo = [
            clamp_idx(((lo.x - origin.x) / res).floor(), dims[0]),
            clamp_idx(((lo.y - origin.y) / res).floor(), dims[1]),
            clamp_idx(((lo.z - origin.z) / res).floor(), dims[2]),
        ];
        let ihi = [
            clamp_idx(((hi.x - origin.x) / res).ceil(), dims[0]),
            clamp_idx(((hi.y - origin.y) / res).ceil(), dims[1]),
            clamp_idx(((hi.z - origin.z) / res).ceil(), dims[2]),
        ];
        for iz in ilo[2]..=ihi[2] {
            for iy in ilo[1]..=ihi[1] {
                for ix in ilo[0]..=ihi[0] {
                    let idx = [ix, iy, iz];
                    if !self.true_world.is_occupied(idx) || self.known_raw.is_occupied(idx) {
                        continue;
                    }
                    let c = self.true_world.index_to_world(idx);
                    if (c - center).norm_squared() <= r2 {
                        self.known_raw.set_occupied(idx);
                        newly.push(idx);
                    }
                }
            }
        }
        if !newly.is_empty() {
            for &idx in &newly {
                self.known_inflated.set_occupied(idx);
            }
            let mut flipped = self
                .known_inflated
                .stamp_inflated_sites(&newly, self.known_inflated.inflation_radius());
            flipped.extend_from_slice(&newly);
            self.field.update_with_new_sites(&flipped);
            self.map_changed_since_plan = true;
        }
        newly
    }

    /// Collision beats periodic; periodic needs both an elapsed period and
    /// new map information since the last plan; a missing or fully executed
    /// trajectory short of the goal always triggers.
    pub fn check_trigger(&self) -> Option<TriggerReason> {
        let needs_plan = match &self.active {
            None => true,
            Some(active) => active.finished(self.clock),
        };
        if needs_plan {
            return Some(if self.plans_made == 0 {
                TriggerReason::Initial
            } else {
                TriggerReason::Periodic
            });
        }
        if self.remaining_path_collides() {
            return Some(TriggerReason::Collision);
        }
        // Periodic updates make sense only when there is something to update
        // on: new map information, or a horizon-local trajectory that must be
        // extended toward the global goal before it runs out.
        let heading_short = self.active.as_ref().is_some_and(|a| !a.ends_at_goal);
        if self.clock - self.last_plan_time >= self.cfg.replan_period - 1e-9
            && (self.map_changed_since_plan || heading_short)
        {
            return Some(TriggerReason::Periodic);
        }
        None
    }

    fn remaining_path_collides(&self) -> bool {
        let Some(active) = &self.active else {
            return false;
        };
        let (lo, hi) = active.trajectory.domain();
        let from = (self.clock - active.t0 + lo).max(lo);
        if from >= hi {
            return false;
        }
        let step = self.cfg.pipeline.search.check_step;
        let n = ((hi - from) / step).ceil().max(1.0) as usize;
        for k in 0..=n {
            let t = from + (hi - from) * k as f64 / n as f64;
            let p = active.trajectory.eval(t, 0).expect("in-domain evaluation");
            if let Some(idx) = self.known_inflated.world_to_index(&p) {
                if self.known_inflated.is_occupied(idx) {
                    return true;
                }
            }
        }
        false
    }

    /// Plan from the predicted handoff state toward the global goal within
    /// the sensing horizon.
    pub fn plan_local(&self, from: &State) -> Result<PlanOutput> {
        let horizon = Horizon {
            center: from.position,
            radius: self.cfg.sensing_radius,
        };
        plan_local(
            &self.known_inflated,
            &self.field,
            from,
            &self.goal,
            &self.cfg.pipeline,
            Some(&horizon),
        )
    }

    fn state_at_clock(&self, clock: f64) -> State {
        match &self.active {
            Some(active) => active.state_at_clock(clock),
            None => State::at_rest(self.robot.position),
        }
    }
}

/// Run a full mission. Ends on arrival within the goal tolerance or on
/// timeout; failures are reported in the log, not as errors.
pub fn run_mission(
    true_world: &VoxelGrid,
    start: State,
    goal: State,
    cfg: &MissionConfig,
    reveals: &[ScriptedReveal],
) -> Result<MissionLog> {
    let mut mission = Mission::new(
        true_world.clone(),
        start,
        goal,
        cfg.clone(),
        reveals.to_vec(),
    )?;
    let tick = cfg.tick;
    let latency_ticks = (cfg.commit_latency / tick).ceil().max(1.0);
    let latency = latency_ticks * tick;

    let mut log = MissionLog {
        success: false,
        failure_reason: None,
        elapsed: 0.0,
        replans: Vec::new(),
        collision_triggers: 0,
        periodic_triggers: 0,
        executed: Vec::new(),
        audit_samples: 0,
        audit_collisions: 0,
        max_position_jump: 0.0,
        max_velocity_jump: 0.0,
        plan_wall_time_total: 0.0,
    };
    let mut last_failure: Option<String> = None;

    log.executed.push((0.0, mission.robot));

    loop {
        // Scripted obstacles appear in the true world at their time.
        let clock = mission.clock;
        let due: Vec<ScriptedReveal> = mission
            .reveals
            .iter()
            .filter(|r| r.time <= clock + 1e-9)
            .cloned()
            .collect();
        if !due.is_empty() {
            mission.reveals.retain(|r| r.time > clock + 1e-9);
            for r in &due {
                mission.true_world.fill_box(&r.min, &r.max);
            }
        }

        mission.sense();

        // Hand over a pending plan exactly on its activation tick.
        if let Some((at, _)) = &mission.pending {
            if clock >= *at - 1e-9 {
                let (at, plan) = mission.pending.take().unwrap();
                let old_state = mission.state_at_clock(at);
                // Measure continuity against what the robot will actually
                // fly: the adjusted trajectory evaluated at its domain start
                // (time adjustment may have stretched boundary spans).
                let lo = plan.final_trajectory.domain().0;
                let new_start = plan.final_trajectory.state_at(lo)?;
                let pos_jump = (new_start.position - old_state.position).norm();
                let vel_jump = (new_start.velocity - old_state.velocity).norm();
                log.max_position_jump = log.max_position_jump.max(pos_jump);
                log.max_velocity_jump = log.max_velocity_jump.max(vel_jump);
                if let Some(last) = log.replans.last_mut() {
                    last.position_jump = pos_jump;
                    last.velocity_jump = vel_jump;
                }
                let end_state = plan
                    .final_trajectory
                    .state_at(plan.final_trajectory.domain().1)?;
                let ends_at_goal =
                    (end_state.position - goal.position).norm() <= cfg.goal_tolerance;
                mission.active = Some(ActivePlan {
                    trajectory: plan.final_trajectory,
                    t0: at,
                    end_state,
                    ends_at_goal,
                });
            }
        }

        if mission.pending.is_none() {
            if let Some(reason) = mission.check_trigger() {
                let switch_at = clock + latency;
                let from = mission.state_at_clock(switch_at);
                let t_plan = Instant::now();
                let attempt = mission.plan_local(&from);
                log.plan_wall_time_total += t_plan.elapsed().as_secs_f64();
                match reason {
                    TriggerReason::Collision => log.collision_triggers += 1,
                    TriggerReason::Periodic => log.periodic_triggers += 1,
                    TriggerReason::Initial => {}
                }
                mission.last_plan_time = clock;
                match attempt {
                    Ok(plan) => {
                        mission.map_changed_since_plan = false;
                        mission.plans_made += 1;
                        log.replans.push(ReplanRecord {
                            time: clock,
                            reason,
                            ok: true,
                            failure: None,
                            timings: Some(plan.timings),
                            expansions: plan.search.expansions,
                            used_fallback: plan.used_fallback,
                            trajectory_duration: plan.final_trajectory.duration(),
                            position_jump: 0.0,
                            velocity_jump: 0.0,
                        });
                        mission.pending = Some((switch_at, plan));
                    }
                    Err(err) => {
                        last_failure = Some(err.to_string());
                        log.replans.push(ReplanRecord {
                            time: clock,
                            reason,
                            ok: false,
                            failure: Some(err.to_string()),
                            timings: None,
                            expansions: 0,
                            used_fallback: false,
                            trajectory_duration: 0.0,
                            position_jump: 0.0,
                            velocity_jump: 0.0,
                        });
                    }
                }
            }
        }

        // Advance one tick, auditing the executed path at the check step.
        let audit_step = cfg.pipeline.search.check_step.min(tick);
        let substeps = (tick / audit_step).ceil().max(1.0) as usize;
        for k in 1..=substeps {
            let t = clock + tick * k as f64 / substeps as f64;
            let s = mission.state_at_clock(t);
            log.audit_samples += 1;
            if let Some(idx) = mission.true_world.world_to_index(&s.position) {
                if mission.true_world.is_occupied(idx) {
                    log.audit_collisions += 1;
                }
            }
            log.executed.push((t, s));
        }
        mission.clock = clock + tick;
        mission.robot = mission.state_at_clock(mission.clock);

        if (mission.robot.position - goal.position).norm() <= cfg.goal_tolerance {
            log.success = true;
            break;
        }
        if mission.clock >= cfg.timeout {
            log.failure_reason = Some(match &last_failure {
                Some(f) => format!(
                    "timeout after {:.1} s (last plan failure: {f})",
                    mission.clock
                ),
                None => format!("timeout after {:.1} s", mission.clock),
            });
            break;
        }
    }

    log.elapsed = mission.clock;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel_map::WorldSpec;

    fn small_world(extent: f64, obstacles: usize, seed: u64) -> VoxelGrid {
        let spec = WorldSpec::pillars(Vector3::new(extent, extent, 3.0), obstacles, seed);
        crate::voxel_map::generate_world(&spec, 0.2, 0.3).unwrap()
    }

    fn mission_cfg() -> MissionConfig {
        let mut cfg = MissionConfig::for_resolution(0.2);
        cfg.timeout = 60.0;
        cfg
    }

    #[test]
    fn sense_full_reveal_with_huge_radius() {
        let world = small_world(6.0, 10, 3);
        let mut cfg = mission_cfg();
        cfg.sensing_radius = 100.0;
        let start = State::at_rest(Vector3::new(0.5, 0.5, 1.5));
        let goal = State::at_rest(Vector3::new(5.5, 5.5, 1.5));
        let mut mission = Mission::new(world.clone(), start, goal, cfg, Vec::new()).unwrap();
        let newly = mission.sense();
        assert_eq!(newly.len(), world.occupied_count());
        assert_eq!(mission.known_world().occupancy(), world.occupancy());
        // Second sense from the same pose reveals nothing.
        assert!(mission.sense().is_empty());
    }

    #[test]
    fn sense_far_from_obstacles_changes_nothing() {
        let mut world = small_world(6.0, 0, 3);
        world.set_occupied([29, 29, 14]);
        let cfg = mission_cfg();
        let start = State::at_rest(Vector3::new(0.5, 0.5, 0.5));
        let goal = State::at_rest(Vector3::new(5.0, 5.0, 1.5));
        let mut mission = Mission::new(world, start, goal, cfg, Vec::new()).unwrap();
        // Obstacle is ~7 m away, outside the 5 m sphere.
        assert!(mission.sense().is_empty());
    }

    #[test]
    fn empty_world_mission_plans_once() {
        // Goal within the sensing sphere: the first plan reaches it exactly,
        // and with no new information there is nothing to replan on.
        let world = small_world(8.0, 0, 1);
        let cfg = mission_cfg();
        let start = State::at_rest(Vector3::new(1.0, 4.0, 1.5));
        let goal = State::at_rest(Vector3::new(5.0, 4.0, 1.5));
        let log = run_mission(&world, start, goal, &cfg, &[]).unwrap();
        assert!(log.success, "{:?}", log.failure_reason);
        assert_eq!(log.replans.len(), 1);
        assert_eq!(log.collision_triggers, 0);
        assert_eq!(log.audit_collisions, 0);
    }

    #[test]
    fn beyond_horizon_mission_marches_to_goal() {
        let world = small_world(14.0, 0, 1);
        let cfg = mission_cfg();
        let start = State::at_rest(Vector3::new(1.0, 7.0, 1.5));
        let goal = State::at_rest(Vector3::new(13.0, 7.0, 1.5));
        let log = run_mission(&world, start, goal, &cfg, &[]).unwrap();
        assert!(log.success, "{:?}", log.failure_reason);
        assert!(log.replans.len() > 1, "horizon hops need periodic replans");
        assert_eq!(log.audit_collisions, 0);
    }

    #[test]
    fn scripted_wall_triggers_collision_replan() {
        let world = small_world(10.0, 0, 1);
        let cfg = mission_cfg();
        let start = State::at_rest(Vector3::new(1.0, 5.0, 1.5));
        let goal = State::at_rest(Vector3::new(9.0, 5.0, 1.5));
        // A wall across the corridor appears early in the flight, leaving a
        // gap near y = 9 to pass through.
        let reveal = ScriptedReveal {
            time: 0.6,
            min: Vector3::new(4.8, 0.0, 0.0),
            max: Vector3::new(5.2, 8.0, 3.0),
        };
        let log = run_mission(&world, start, goal, &cfg, &[reveal]).unwrap();
        assert!(log.success, "{:?}", log.failure_reason);
        assert!(log.collision_triggers >= 1, "log: {:?}", log.replans);
        assert_eq!(log.audit_collisions, 0);
    }

    #[test]
    fn sensing_reveals_only_true_occupancy() {
        // The known world stays a subset of the (mutated) true world even
        // with scripted reveals in play.
        let world = small_world(8.0, 10, 4);
        let cfg = mission_cfg();
        let start = State::at_rest(Vector3::new(1.0, 4.0, 1.5));
        let goal = State::at_rest(Vector3::new(7.0, 4.0, 1.5));
        let reveal = ScriptedReveal {
            time: 0.4,
            min: Vector3::new(3.0, 6.0, 0.0),
            max: Vector3::new(4.0, 7.5, 2.5),
        };
        let mut mission =
            Mission::new(world.clone(), start, goal, cfg, vec![reveal.clone()]).unwrap();
        let mut true_now = world;
        true_now.fill_box(&reveal.min, &reveal.max);
        mission.true_world.fill_box(&reveal.min, &reveal.max);
        mission.sense();
        for (known, truth) in mission
            .known_world()
            .occupancy()
            .iter()
            .zip(true_now.occupancy())
        {
            assert!(!known | truth, "revealed a voxel the true world lacks");
        }
    }

    #[test]
    fn shared_read_only_types_are_send_sync() {
        // Grids, fields and trajectories are shared read-only across
        // concurrent benchmark workers.
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<VoxelGrid>();
        assert_send_sync::<DistanceField>();
        assert_send_sync::<BSplineTrajectory>();
        assert_send_sync::<crate::kino_search::SearchResult>();
    }

    #[test]
    fn unreachable_goal_times_out() {
        let mut world = small_world(6.0, 0, 1);
        // Seal a box around the goal.
        for iz in 0..world.dims()[2] {
            for iy in 10..20 {
                for ix in 10..20 {
                    if ix == 10 || ix == 19 || iy == 10 || iy == 19 {
                        world.set_occupied([ix, iy, iz]);
                    }
                }
            }
        }
        let mut cfg = mission_cfg();
        cfg.timeout = 8.0;
        let start = State::at_rest(Vector3::new(0.5, 0.5, 1.5));
        let goal = State::at_rest(Vector3::new(2.9, 2.9, 1.5));
        let log = run_mission(&world, start, goal, &cfg, &[]).unwrap();
        assert!(!log.success);
        assert!(log.failure_reason.unwrap().contains("timeout"));
    }

    #[test]
    fn handoffs_are_continuous() {
        let world = small_world(12.0, 14, 9);
        let cfg = mission_cfg();
        let start = State::at_rest(Vector3::new(1.0, 6.0, 1.5));
        let goal = State::at_rest(Vector3::new(11.0, 6.0, 1.5));
        let log = run_mission(&world, start, goal, &cfg, &[]).unwrap();
        if log.success {
            assert!(!log.replans.is_empty());
            assert!(
                log.max_position_jump < 1e-6,
                "position jump {}",
                log.max_position_jump
            );
            assert_eq!(log.audit_collisions, 0);
        }
    }

    #[test]
    fn local_plan_ends_within_sensing_radius() {
        let world = small_world(20.0, 0, 1);
        let cfg = mission_cfg();
        let start = State::at_rest(Vector3::new(1.0, 10.0, 1.5));
        let goal = State::at_rest(Vector3::new(19.0, 10.0, 1.5));
        let mut mission = Mission::new(world, start, goal, cfg.clone(), Vec::new()).unwrap();
        mission.sense();
        let plan = mission.plan_local(&start).unwrap();
        let end = plan.search.end.position;
        assert!(
            (end - start.position).norm() <= cfg.sensing_radius + 1e-9,
            "local end {end:?} beyond the sensing sphere"
        );
        // All three stages report strictly positive wall time.
        assert!(plan.timings.search_s > 0.0);
        assert!(plan.timings.optimize_s > 0.0);
        assert!(plan.timings.adjust_s > 0.0);
    }

    #[test]
    fn goal_inside_horizon_behaves_like_global_plan() {
        let world = small_world(8.0, 0, 1);
        let cfg = mission_cfg();
        let start = State::at_rest(Vector3::new(1.0, 4.0, 1.5));
        let goal = State::at_rest(Vector3::new(4.0, 4.0, 1.5));
        let mut mission =
            Mission::new(world.clone(), start, goal, cfg.clone(), Vec::new()).unwrap();
        mission.sense();
        let local = mission.plan_local(&start).unwrap();
        let global = plan_local(
            mission.known_world(),
            &DistanceField::build_capped(&world, 7.0),
            &start,
            &goal,
            &cfg.pipeline,
            None,
        )
        .unwrap();
        assert_eq!(
            local.search.attainment,
            crate::kino_search::GoalAttainment::Analytic
        );
        assert!((local.search.duration - global.search.duration).abs() < 1e-9);
    }
}
