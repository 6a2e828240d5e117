//! Property-based invariants over randomly generated inputs.

use nalgebra::Vector3;
use proptest::prelude::*;

use kinoplan::bspline::BSplineTrajectory;
use kinoplan::time_adjust::{self, TimeAdjustConfig};
use kinoplan::voxel_map::VoxelGrid;

fn arb_grid() -> impl Strategy<Value = (VoxelGrid, Vec<[usize; 3]>)> {
    (
        2usize..12,
        2usize..12,
        2usize..12,
        proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 0..20),
    )
        .prop_map(|(nx, ny, nz, fracs)| {
            let mut grid =
                VoxelGrid::new(Vector3::new(-1.3, 0.4, 2.7), 0.25, [nx, ny, nz], 0.3).unwrap();
            let mut occupied = Vec::new();
            for (fx, fy, fz) in fracs {
                let idx = [
                    (fx * nx as f64) as usize % nx,
                    (fy * ny as f64) as usize % ny,
                    (fz * nz as f64) as usize % nz,
                ];
                grid.set_occupied(idx);
                occupied.push(idx);
            }
            (grid, occupied)
        })
}

fn arb_cubic() -> impl Strategy<Value = BSplineTrajectory> {
    (
        proptest::collection::vec((-8.0f64..8.0, -8.0f64..8.0, -8.0f64..8.0), 7..16),
        0.1f64..0.8,
    )
        .prop_map(|(pts, dt)| {
            let cps: Vec<Vector3<f64>> =
                pts.iter().map(|&(x, y, z)| Vector3::new(x, y, z)).collect();
            BSplineTrajectory::uniform(3, cps, dt, 0.0).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Index/world round trip is exact for every in-bounds voxel.
    #[test]
    fn grid_round_trip((grid, _) in arb_grid()) {
        let dims = grid.dims();
        for iz in 0..dims[2] {
            for iy in 0..dims[1] {
                for ix in 0..dims[0] {
                    let idx = [ix, iy, iz];
                    prop_assert_eq!(grid.world_to_index(&grid.index_to_world(idx)), Some(idx));
                }
            }
        }
    }

    /// Inflation only adds occupancy, and inflating twice at the same radius
    /// changes nothing beyond the first application's raw set.
    #[test]
    fn inflation_monotone((grid, occupied) in arb_grid()) {
        let inflated = grid.inflate();
        for idx in &occupied {
            prop_assert!(inflated.is_occupied(*idx));
        }
        let raw_count = grid.occupied_count();
        prop_assert!(inflated.occupied_count() >= raw_count);
    }

    /// Translating every control point translates the curve exactly
    /// (partition of unity / affine invariance).
    #[test]
    fn spline_affine_invariance(traj in arb_cubic(), sx in -4.0f64..4.0, sy in -4.0f64..4.0, sz in -4.0f64..4.0) {
        let shift = Vector3::new(sx, sy, sz);
        let shifted = traj
            .with_control_points(traj.control_points().iter().map(|q| q + shift).collect())
            .unwrap();
        let (lo, hi) = traj.domain();
        for k in 0..8 {
            let t = lo + (hi - lo) * k as f64 / 7.0;
            let d = shifted.eval(t, 0).unwrap() - traj.eval(t, 0).unwrap();
            prop_assert!((d - shift).norm() < 1e-9);
        }
    }

    /// Time adjustment never shrinks the duration, never touches control
    /// points, and keeps the knot vector nondecreasing.
    #[test]
    fn adjust_duration_monotone(traj in arb_cubic()) {
        let cfg = TimeAdjustConfig::default();
        let outcome = time_adjust::adjust(&traj, &cfg).unwrap();
        prop_assert!(outcome.trajectory.duration() >= traj.duration() - 1e-12);
        prop_assert_eq!(traj.control_points(), outcome.trajectory.control_points());
        for w in outcome.trajectory.knots().windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
        // Bounded growth: within one round a single span lies in at most
        // p velocity windows and p+1 acceleration windows, each stretch
        // capped by its alpha.
        let per_round = cfg.alpha_v.powi(3) * cfg.alpha_a.powi(4);
        let bound = per_round.powi(outcome.rounds as i32);
        prop_assert!(outcome.trajectory.duration() <= traj.duration() * bound * (1.0 + 1e-9));
    }

    /// Matrix-form and de Boor evaluation agree on uniform cubics.
    #[test]
    fn eval_paths_agree(traj in arb_cubic(), frac in 0.0f64..1.0) {
        let (lo, hi) = traj.domain();
        let t = lo + (hi - lo) * frac;
        let a = traj.eval_matrix(t, 0).unwrap();
        let b = traj.eval_de_boor(t, 0).unwrap();
        prop_assert!((a - b).norm() < 1e-10);
    }
}
