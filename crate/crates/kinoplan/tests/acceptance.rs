//! Acceptance suite: every release gate in one sequential run, one
//! pass/fail line per criterion.
//!
//! The criteria run in a single test so wall-clock measurements are not
//! distorted by parallel test threads. A failing criterion does not stop the
//! later ones; all verdicts print before the final assert.

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kinoplan::bspline::{self, BSplineTrajectory};
use kinoplan::cli::{run_bench, BenchReport};
use kinoplan::config::RunConfig;
use kinoplan::distance_field::DistanceField;
use kinoplan::kino_search::State;
use kinoplan::replan::{run_mission, MissionLog};
use kinoplan::time_adjust::{self, StretchKind, TimeAdjustConfig};
use kinoplan::traj_opt;
use kinoplan::voxel_map::VoxelGrid;

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(results: &mut Vec<Verdict>, name: &'static str, pass: bool, detail: String) {
    println!(
        "criterion {} [{}]: {}",
        name,
        if pass { "PASS" } else { "FAIL" },
        detail
    );
    results.push(Verdict { name, pass, detail });
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();

    // Shared 100-seed benchmark at the default settings: 40x40x5 m,
    // 100 obstacles, res 0.2 m, v_max 3, a_max 2, r = 2, tau = 0.5.
    let suite_start = Instant::now();
    let cfg = RunConfig::default();
    assert_eq!(cfg.seeds, 100);
    let fine = run_bench(&cfg).expect("benchmark harness");
    let c1_elapsed = suite_start.elapsed().as_secs_f64();

    criterion_1_search_statistics(&mut results, &fine, c1_elapsed);
    criterion_2_resolution_trend(&mut results, &cfg, &fine);
    criterion_3_jerk(&mut results, &fine);
    criterion_4_convergence(&mut results, &cfg);
    criterion_5_scaling_laws(&mut results);
    criterion_6_oracles(&mut results);
    criterion_7_certificates(&mut results);
    criterion_8_missions(&mut results, &cfg);

    let failed: Vec<&Verdict> = results.iter().filter(|v| !v.pass).collect();
    assert!(
        failed.is_empty(),
        "failed criteria: {:?}",
        failed
            .iter()
            .map(|v| format!("{}: {}", v.name, v.detail))
            .collect::<Vec<_>>()
    );
}

/// Success rate >= 95%, mean duration within 7.7 s +- 20%, mean control
/// cost within 15.1 +- 30%, mean search time <= 50 ms, and the whole
/// statistics run done within 10 minutes.
fn criterion_1_search_statistics(results: &mut Vec<Verdict>, report: &BenchReport, elapsed: f64) {
    let success = report.success_rate();
    let duration = mean(report.successes().map(|r| r.traj_duration));
    let ctrl = mean(report.successes().map(|r| r.control_cost));
    let search = report.search_time_stats();
    let pass = success >= 0.95
        && (duration - 7.7).abs() <= 0.2 * 7.7
        && (ctrl - 15.1).abs() <= 0.3 * 15.1
        && search.mean <= 0.050
        && elapsed <= 600.0;
    check(
        results,
        "1 (search statistics)",
        pass,
        format!(
            "success {:.1}% (>=95), duration {:.3} s (7.7+-20%), ctrl {:.3} (15.1+-30%), \
             search {:.2} ms (<=50), suite {:.0} s (<=600)",
            100.0 * success,
            duration,
            ctrl,
            search.mean * 1e3,
            elapsed
        ),
    );
}

/// Planning the same worlds on a 1.0 m grid must lower the success rate
/// strictly and must not raise the mean search time: coarser voxels prune
/// harder, losing feasible paths but expanding less.
fn criterion_2_resolution_trend(results: &mut Vec<Verdict>, cfg: &RunConfig, fine: &BenchReport) {
    let mut coarse_cfg = cfg.clone();
    coarse_cfg.resolution = 1.0;
    let coarse = run_bench(&coarse_cfg).expect("coarse benchmark");
    let fine_search = fine.search_time_stats();
    let coarse_search = coarse.search_time_stats();
    let pass =
        coarse.success_rate() < fine.success_rate() && coarse_search.mean <= fine_search.mean;
    check(
        results,
        "2 (resolution trend)",
        pass,
        format!(
            "success {:.1}% < {:.1}%, search {:.3} ms <= {:.3} ms",
            100.0 * coarse.success_rate(),
            100.0 * fine.success_rate(),
            coarse_search.mean * 1e3,
            fine_search.mean * 1e3
        ),
    );
}

/// Mean squared-jerk integral of the optimized trajectories at most
/// 36 m^2/s^5 plus 25% slack, and the optimizer must not worsen the
/// initial fit on at least 90% of instances.
fn criterion_3_jerk(results: &mut Vec<Verdict>, report: &BenchReport) {
    let jerk = mean(report.successes().map(|r| r.jerk_optimized));
    let improved = report
        .successes()
        .filter(|r| r.jerk_optimized <= r.jerk_initial)
        .count();
    let total = report.successes().count();
    let frac = improved as f64 / total.max(1) as f64;
    let pass = jerk <= 36.0 * 1.25 && frac >= 0.90;
    check(
        results,
        "3 (optimized smoothness)",
        pass,
        format!(
            "mean jerk^2 {jerk:.3} (<=45), optimized<=initial on {improved}/{total} ({:.0}%)",
            frac * 100.0
        ),
    );
}

/// Normalized total cost (the run's own [0,1] scale, floor from a
/// 400-iteration reference) falls below 0.1 within 100 iterations on at
/// least 90% of instances.
fn criterion_4_convergence(results: &mut Vec<Verdict>, cfg: &RunConfig) {
    let mut deep = cfg.clone();
    deep.max_iters = 400;
    deep.budget = 1.0;
    let report = run_bench(&deep).expect("convergence benchmark");
    let ok = report
        .successes()
        .filter(|r| r.norm_cost_at_100 < 0.1)
        .count();
    let total = report.successes().count();
    let frac = ok as f64 / total.max(1) as f64;
    let pass = frac >= 0.90;
    check(
        results,
        "4 (optimizer convergence)",
        pass,
        format!(
            "normalized cost < 0.1 by iteration 100 on {ok}/{total} ({:.0}%)",
            frac * 100.0
        ),
    );
}

/// On 1000 random non-uniform cubic splines with injected violations, every
/// applied stretch divides the targeted velocity control point by exactly
/// mu (and acceleration by mu^2) to 1e-12, and the loop ends violation-free
/// within 50 rounds on all of them.
fn criterion_5_scaling_laws(results: &mut Vec<Verdict>) {
    let cfg = TimeAdjustConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5050);
    let mut ratio_worst = 0.0f64;
    let mut stretches = 0usize;
    let mut adjusted = 0usize;
    let mut failures = Vec::new();

    for trial in 0..1000 {
        let n_cp = rng.random_range(8..16);
        let control_points: Vec<Vector3<f64>> = (0..n_cp)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-6.0..6.0),
                    rng.random_range(-6.0..6.0),
                    rng.random_range(-6.0..6.0),
                )
            })
            .collect();
        // Random strictly increasing non-uniform knots.
        let m = n_cp + 4;
        let mut knots = Vec::with_capacity(m);
        let mut t = 0.0;
        for _ in 0..m {
            knots.push(t);
            t += rng.random_range(0.08..0.5);
        }
        let traj = BSplineTrajectory::new(3, control_points, knots).expect("valid spline");
        let (v0, a0) = time_adjust::find_infeasible(&traj, &cfg).expect("derivatives");
        if v0.is_empty() && a0.is_empty() {
            continue; // no injected violation this draw
        }
        adjusted += 1;

        let outcome = time_adjust::adjust(&traj, &cfg).expect("adjust");
        if !outcome.feasible || outcome.rounds > 50 {
            failures.push(format!(
                "trial {trial}: rounds {} feasible {}",
                outcome.rounds, outcome.feasible
            ));
            continue;
        }
        for ev in &outcome.stretches {
            stretches += 1;
            let expected = match ev.kind {
                StretchKind::Velocity => ev.before / ev.mu,
                StretchKind::Acceleration => ev.before / (ev.mu * ev.mu),
            };
            let rel = (ev.after - expected).abs() / expected.abs().max(1e-300);
            ratio_worst = ratio_worst.max(rel);
            if rel > 1e-12 {
                failures.push(format!("trial {trial}: ratio error {rel:e}"));
            }
        }
        let (v1, a1) =
            time_adjust::find_infeasible(&outcome.trajectory, &cfg).expect("derivatives");
        if !v1.is_empty() || !a1.is_empty() {
            failures.push(format!("trial {trial}: violations remain"));
        }
    }

    let pass = failures.is_empty() && adjusted >= 900;
    check(
        results,
        "5 (scaling-law exactness)",
        pass,
        format!(
            "{adjusted} infeasible splines adjusted, {stretches} stretches, worst ratio error {ratio_worst:.2e}, {} failures",
            failures.len()
        ),
    );
}

/// Property-based oracle equivalences: exact distance transform vs brute
/// force on 500 random grids up to 20^3; matrix-form vs de Boor evaluation
/// to 1e-12 on 1000 samples; analytic gradients vs central differences to
/// 1e-4 relative on 1000 samples each; fit round-trip to 1e-8.
fn criterion_6_oracles(results: &mut Vec<Verdict>) {
    let mut failures: Vec<String> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(606);

    // Distance transform vs brute force, exact.
    for seed in 0..500u64 {
        let mut g_rng = ChaCha8Rng::seed_from_u64(seed);
        let n = g_rng.random_range(4..=20usize);
        let fill = [0.003, 0.02, 0.08, 0.3][seed as usize % 4];
        let res = 0.25;
        let mut grid = VoxelGrid::new(Vector3::zeros(), res, [n, n, n], 0.0).unwrap();
        for iz in 0..n {
            for iy in 0..n {
                for ix in 0..n {
                    if g_rng.random_bool(fill) {
                        grid.set_occupied([ix, iy, iz]);
                    }
                }
            }
        }
        let field = DistanceField::build(&grid);
        let occupied = grid.occupied_indices();
        'voxels: for iz in 0..n {
            for iy in 0..n {
                for ix in 0..n {
                    let mut best = f64::INFINITY;
                    for o in &occupied {
                        let d2 = ((ix as i64 - o[0] as i64).pow(2)
                            + (iy as i64 - o[1] as i64).pow(2)
                            + (iz as i64 - o[2] as i64).pow(2))
                            as f64;
                        best = best.min(d2);
                    }
                    let expected = if best.is_finite() {
                        res * best.sqrt()
                    } else {
                        f64::INFINITY
                    };
                    let got = field.distance_at_index([ix, iy, iz]);
                    if got != expected && !(got.is_infinite() && expected.is_infinite()) {
                        failures.push(format!(
                            "edt seed {seed} at ({ix},{iy},{iz}): {got} vs {expected}"
                        ));
                        break 'voxels;
                    }
                }
            }
        }
    }
    let edt_failures = failures.len();

    // Matrix form vs de Boor on uniform cubics.
    let mut checked = 0;
    while checked < 1000 {
        let n_cp = rng.random_range(6..14);
        let cps: Vec<Vector3<f64>> = (0..n_cp)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                )
            })
            .collect();
        let traj = BSplineTrajectory::uniform(3, cps, rng.random_range(0.1..0.8), 0.0).unwrap();
        let (lo, hi) = traj.domain();
        let t = rng.random_range(lo..hi);
        let a = traj.eval_matrix(t, 0).unwrap();
        let b = traj.eval_de_boor(t, 0).unwrap();
        if (a - b).norm() > 1e-12 {
            failures.push(format!("matrix vs de boor: {} at t {t}", (a - b).norm()));
        }
        checked += 1;
    }

    // Analytic gradients vs finite differences: field gradient plus the
    // three cost terms, 1000 samples each, off interpolation faces.
    let mut grid = VoxelGrid::new(Vector3::zeros(), 0.2, [24, 24, 24], 0.0).unwrap();
    for _ in 0..25 {
        grid.set_occupied([
            rng.random_range(0..24),
            rng.random_range(0..24),
            rng.random_range(0..24),
        ]);
    }
    let field = DistanceField::build_capped(&grid, 7.0);
    let h = 1e-6;
    let off_faces = |p: &Vector3<f64>| {
        (0..3).all(|a| {
            let u = p[a] / 0.2 - 0.5;
            (u - u.round()).abs() > 0.02
        })
    };
    let mut done = 0;
    while done < 1000 {
        let p = Vector3::new(
            rng.random_range(0.3..4.5),
            rng.random_range(0.3..4.5),
            rng.random_range(0.3..4.5),
        );
        if !off_faces(&p) {
            continue;
        }
        let (grad, _) = field.gradient_at(&p);
        for a in 0..3 {
            let mut hi = p;
            let mut lo = p;
            hi[a] += h;
            lo[a] -= h;
            let fd = (field.distance_at(&hi).0 - field.distance_at(&lo).0) / (2.0 * h);
            if (grad[a] - fd).abs() / fd.abs().max(1.0) > 1e-4 {
                failures.push(format!("field gradient at {p:?} axis {a}"));
            }
        }
        done += 1;
    }

    let sample_points = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(0.5..4.3),
                    rng.random_range(0.5..4.3),
                    rng.random_range(0.5..4.3),
                )
            })
            .collect()
    };
    let fd_check = |name: &str,
                    points: &[Vector3<f64>],
                    analytic: &[Vector3<f64>],
                    cost: &dyn Fn(&[Vector3<f64>]) -> f64,
                    failures: &mut Vec<String>| {
        let n = points.len() - 1;
        for i in 3..=n - 3 {
            for axis in 0..3 {
                let mut hi = points.to_vec();
                let mut lo = points.to_vec();
                hi[i][axis] += h;
                lo[i][axis] -= h;
                let fd = (cost(&hi) - cost(&lo)) / (2.0 * h);
                if (analytic[i][axis] - fd).abs() / fd.abs().max(1.0) > 1e-4 {
                    failures.push(format!("{name} gradient slot {i} axis {axis}"));
                }
            }
        }
    };

    // 1000 interior-coordinate samples per cost term (12 splines x 9-ish
    // interior points x 3 axes covers it).
    let mut cost_samples = 0;
    while cost_samples < 1000 {
        let points = sample_points(&mut rng, 12);
        if !points.iter().all(&off_faces) {
            continue;
        }
        let (_, g_s) = traj_opt::cost_smooth(&points, 3);
        fd_check(
            "smooth",
            &points,
            &g_s,
            &|p| traj_opt::cost_smooth(p, 3).0,
            &mut failures,
        );
        let (_, g_c, _) = traj_opt::cost_collision(&points, 3, &field, 0.7);
        fd_check(
            "collision",
            &points,
            &g_c,
            &|p| traj_opt::cost_collision(p, 3, &field, 0.7).0,
            &mut failures,
        );
        let (_, g_d) = traj_opt::cost_dynamics(&points, 3, 0.3, 1.5, 1.5);
        fd_check(
            "dynamics",
            &points,
            &g_d,
            &|p| traj_opt::cost_dynamics(p, 3, 0.3, 1.5, 1.5).0,
            &mut failures,
        );
        cost_samples += (12 - 6) * 3 * 3;
    }

    // Fit round-trip to 1e-8.
    for _ in 0..50 {
        let n_cp = rng.random_range(8..14);
        let cps: Vec<Vector3<f64>> = (0..n_cp)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                )
            })
            .collect();
        let dt = rng.random_range(0.1..0.5);
        let original = BSplineTrajectory::uniform(3, cps, dt, 0.0).unwrap();
        let (lo, _) = original.domain();
        let k = original.control_points().len() - 2;
        let samples: Vec<(f64, State)> = (0..k)
            .map(|i| {
                let t = lo + i as f64 * dt;
                (t, original.state_at(t).unwrap())
            })
            .collect();
        let refit =
            bspline::fit_from_samples(&samples, dt, (&samples[0].1, &samples[k - 1].1)).unwrap();
        for (a, b) in original.control_points().iter().zip(refit.control_points()) {
            if (a - b).norm() > 1e-8 {
                failures.push(format!("fit round-trip error {}", (a - b).norm()));
            }
        }
    }

    let pass = failures.is_empty();
    check(
        results,
        "6 (oracle equivalence suites)",
        pass,
        format!(
            "edt 500 grids ({edt_failures} mismatches), eval 1000 samples, gradients 4x1000 samples, fit 50 round-trips; {} failures{}",
            failures.len(),
            if failures.is_empty() { String::new() } else { format!(" (first: {})", failures[0]) }
        ),
    );
}

/// On 100 trajectories declared SAFE by the hull certificate, dense sampling
/// (1000 points per segment) finds zero occupied voxels.
fn criterion_7_certificates(results: &mut Vec<Verdict>) {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut safe_found = 0usize;
    let mut collisions = 0usize;
    let mut attempts = 0usize;

    while safe_found < 100 && attempts < 4000 {
        attempts += 1;
        let spec = kinoplan::voxel_map::WorldSpec::pillars(
            Vector3::new(10.0, 10.0, 3.0),
            12,
            rng.random_range(0..1_000_000),
        );
        let world = kinoplan::voxel_map::generate_world(&spec, 0.2, 0.3)
            .unwrap()
            .inflate();
        let field = DistanceField::build_capped(&world, 5.0);

        // A gently turning chain of closely spaced control points from a
        // random free seed point.
        let start = Vector3::new(
            rng.random_range(1.0..9.0),
            rng.random_range(1.0..9.0),
            rng.random_range(0.8..2.2),
        );
        if field.distance_at(&start).0 < 1.0 {
            continue;
        }
        let mut dir = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.2..0.2),
        )
        .normalize();
        let mut cps = vec![start];
        for _ in 0..11 {
            let turn = Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.1..0.1),
            );
            dir = (dir + turn).normalize();
            let next = cps.last().unwrap() + dir * 0.12;
            cps.push(next);
        }
        let traj = BSplineTrajectory::uniform(3, cps, 0.1, 0.0).unwrap();
        let verdicts = bspline::check_hull_safety(&traj, &field);
        if !verdicts.iter().all(|v| v.safe) {
            continue;
        }
        safe_found += 1;

        let (lo, hi) = traj.domain();
        let segments = verdicts.len();
        let total_samples = 1000 * segments;
        for k in 0..=total_samples {
            let t = lo + (hi - lo) * k as f64 / total_samples as f64;
            let p = traj.eval(t, 0).unwrap();
            if let Some(idx) = world.world_to_index(&p) {
                if world.is_occupied(idx) {
                    collisions += 1;
                }
            }
        }
    }

    let pass = safe_found == 100 && collisions == 0;
    check(
        results,
        "7 (safety certificate soundness)",
        pass,
        format!("{safe_found}/100 SAFE trajectories densely sampled, {collisions} collisions"),
    );
}

/// 100 receding-horizon missions with 5 m sensing reach the goal on at least
/// 90 seeds, with zero ground-truth collisions and position handoff jumps
/// below 1e-6 m on every successful seed.
fn criterion_8_missions(results: &mut Vec<Verdict>, cfg: &RunConfig) {
    let mission_cfg = cfg.mission_config();
    let start = State::at_rest(cfg.bench_start);
    let goal = State::at_rest(cfg.bench_goal);

    let mut successes = 0usize;
    let mut collisions = 0usize;
    let mut bad_handoffs = 0usize;
    let mut worst_jump = 0.0f64;
    let mut logs: Vec<(u64, MissionLog)> = Vec::new();

    for i in 0..100u64 {
        let seed = cfg.base_seed.wrapping_add(i);
        let world = cfg.make_world(seed).expect("world generation");
        let log = run_mission(&world, start, goal, &mission_cfg, &[]).expect("mission run");
        if log.success {
            successes += 1;
            collisions += log.audit_collisions;
            worst_jump = worst_jump.max(log.max_position_jump);
            if log.max_position_jump >= 1e-6 {
                bad_handoffs += 1;
            }
        }
        logs.push((seed, log));
    }

    let pass = successes >= 90 && collisions == 0 && bad_handoffs == 0;
    check(
        results,
        "8 (mission audit)",
        pass,
        format!(
            "{successes}/100 reached goal, {collisions} ground-truth collisions, \
             {bad_handoffs} discontinuous handoffs (worst jump {worst_jump:.2e} m)"
        ),
    );
    if !pass {
        for (seed, log) in logs.iter().filter(|(_, l)| !l.success).take(5) {
            println!("  failed seed {seed}: {:?}", log.failure_reason);
        }
    }
}
