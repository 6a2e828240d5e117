//! Gradient-based refinement of the interior control points of a uniform
//! cubic B-spline.
//!
//! The objective is `lambda_s f_s + lambda_c f_c + lambda_d (f_v + f_a)`:
//! an elastic-band smoothness term over second differences of control points,
//! a clearance term that penalizes control points closer than a threshold to
//! obstacles through the distance field, and soft velocity/acceleration
//! penalties on the derivative control points. All gradients are analytic;
//! the solver is limited-memory quasi-Newton with Armijo backtracking (the
//! trilinear field is only piecewise-C1, so curvature conditions are not
//! enforced).
//!
//! The first and last `p` control points encode the boundary state and are
//! never touched.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::bspline::BSplineTrajectory;
use crate::distance_field::DistanceField;
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub smooth_weight: f64,
    pub collision_weight: f64,
    pub dynamics_weight: f64,
    /// Obstacle clearance threshold: below this distance a control point is
    /// penalized quadratically.
    pub clearance_threshold: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub max_iters: usize,
    /// Wall-clock budget in seconds.
    pub budget: f64,
    /// Convergence threshold on the max-norm of the gradient.
    pub grad_tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            smooth_weight: 10.0,
            collision_weight: 0.8,
            dynamics_weight: 0.01,
            clearance_threshold: 0.7,
            v_max: 3.0,
            a_max: 2.0,
            max_iters: 100,
            budget: 0.05,
            grad_tol: 1e-4,
        }
    }
}

/// One row of the per-iteration cost trace.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TracePoint {
    pub iter: usize,
    pub smooth: f64,
    pub collision: f64,
    pub dynamics: f64,
    pub total: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub trajectory: BSplineTrajectory,
    pub trace: Vec<TracePoint>,
    /// Gradient norm reached `grad_tol`.
    pub converged: bool,
    /// The line search could make no further progress; the best iterate is
    /// returned anyway.
    pub line_search_failed: bool,
    /// Some control point left the distance field during optimization.
    pub out_of_field: bool,
}

/// Writes the cost trace as CSV (`iter,f_s,f_c,f_vfa,f_total,elapsed_s`).
pub fn write_trace_csv(trace: &[TracePoint], path: &Path) -> Result<()> {
    let mut text = String::from("iter,f_s,f_c,f_vfa,f_total,elapsed_s\n");
    for row in trace {
        writeln!(
            text,
            "{},{},{},{},{},{}",
            row.iter, row.smooth, row.collision, row.dynamics, row.total, row.elapsed_s
        )
        .expect("string write");
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Elastic-band smoothness cost
/// `f_s = sum_{i=p-1}^{N-p+1} |Q_{i+1} - 2 Q_i + Q_{i-1}|^2`
/// with its gradient restricted to the interior control points
/// (`p..=N-p`); boundary control points contribute as constants.
pub fn cost_smooth(points: &[Vector3<f64>], degree: usize) -> (f64, Vec<Vector3<f64>>) {
    let n = points.len() - 1;
    let mut grad = vec![Vector3::zeros(); points.len()];
    let mut cost = 0.0;
    let interior = degree..=n - degree;
    for i in degree - 1..=n - degree + 1 {
        let f = points[i + 1] - points[i] * 2.0 + points[i - 1];
        cost += f.norm_squared();
        if interior.contains(&(i + 1)) {
            grad[i + 1] += f * 2.0;
        }
        if interior.contains(&i) {
            grad[i] -= f * 4.0;
        }
        if interior.contains(&(i - 1)) {
            grad[i - 1] += f * 2.0;
        }
    }
    (cost, grad)
}

/// Clearance cost `f_c = sum_{i=p}^{N-p} F_c(d(Q_i))` with
/// `F_c(d) = (d - d_thr)^2` for `d <= d_thr` and zero beyond. Control points
/// that leave the field get the clamped-boundary cost plus a quadratic
/// pull-back toward the field interior; the flag reports that it happened.
pub fn cost_collision(
    points: &[Vector3<f64>],
    degree: usize,
    field: &DistanceField,
    d_thr: f64,
) -> (f64, Vec<Vector3<f64>>, bool) {
    let n = points.len() - 1;
    let mut grad = vec![Vector3::zeros(); points.len()];
    let mut cost = 0.0;
    let mut out_of_field = false;
    for i in degree..=n - degree {
        let (d, g, out) = field.distance_and_gradient_at(&points[i]);
        if d <= d_thr {
            let diff = d - d_thr;
            cost += diff * diff;
            grad[i] += g * (2.0 * diff);
        }
        if out {
            out_of_field = true;
            let clamped = clamp_to_field(field, &points[i]);
            let off = points[i] - clamped;
            cost += off.norm_squared();
            grad[i] += off * 2.0;
        }
    }
    (cost, grad, out_of_field)
}

fn clamp_to_field(field: &DistanceField, p: &Vector3<f64>) -> Vector3<f64> {
    let origin = field.origin();
    let res = field.resolution();
    let dims = field.dims();
    let mut out = *p;
    for a in 0..3 {
        let lo = origin[a] + 0.5 * res;
        let hi = origin[a] + (dims[a] as f64 - 0.5) * res;
        out[a] = out[a].clamp(lo, hi);
    }
    out
}

/// Soft dynamic-limit cost on the derivative control points of the uniform
/// spline: per axis, `F_v(v) = (v^2 - v_max^2)^2` when `v^2 > v_max^2`,
/// summed over velocity control points `i = p-1..=N-p` and the analogous
/// acceleration term over `i = p-2..=N-p`.
pub fn cost_dynamics(
    points: &[Vector3<f64>],
    degree: usize,
    dt: f64,
    v_max: f64,
    a_max: f64,
) -> (f64, Vec<Vector3<f64>>) {
    let n = points.len() - 1;
    let mut grad = vec![Vector3::zeros(); points.len()];
    let mut cost = 0.0;
    let interior = degree..=n - degree;

    let v2 = v_max * v_max;
    for i in degree - 1..=n - degree {
        for axis in 0..3 {
            let v = (points[i + 1][axis] - points[i][axis]) / dt;
            let excess = v * v - v2;
            if excess > 0.0 {
                cost += excess * excess;
                let dfdv = 4.0 * v * excess;
                if interior.contains(&(i + 1)) {
                    grad[i + 1][axis] += dfdv / dt;
                }
                if interior.contains(&i) {
                    grad[i][axis] -= dfdv / dt;
                }
            }
        }
    }

    let a2 = a_max * a_max;
    let dt2 = dt * dt;
    for i in degree - 2..=n - degree {
        for axis in 0..3 {
            let a = (points[i + 2][axis] - 2.0 * points[i + 1][axis] + points[i][axis]) / dt2;
            let excess = a * a - a2;
            if excess > 0.0 {
                cost += excess * excess;
                let dfda = 4.0 * a * excess;
                if interior.contains(&(i + 2)) {
                    grad[i + 2][axis] += dfda / dt2;
                }
                if interior.contains(&(i + 1)) {
                    grad[i + 1][axis] -= 2.0 * dfda / dt2;
                }
                if interior.contains(&i) {
                    grad[i][axis] += dfda / dt2;
                }
            }
        }
    }
    (cost, grad)
}

/// Banded preconditioner: the exact (pentadiagonal) Hessian of the
/// smoothness term over the interior control points plus per-coordinate
/// diagonal curvature from the collision and dynamics terms. The smoothness
/// Hessian couples neighbors, so a merely diagonal scaling would let
/// collision pushes diffuse through the elastic band one point per
/// iteration; solving the band propagates them in one step.
///
/// One factored band per axis (the smoothness block is identical, the
/// diagonal extras differ).
struct BandedPreconditioner {
    /// Cholesky factors, one per axis, bandwidth 2.
    factors: [BandedCholesky; 3],
}

const BANDWIDTH: usize = 2;

struct BandedCholesky {
    /// Row-major lower band: `band[r][d]` is entry `(r, r - (BANDWIDTH - d))`,
    /// with `band[r][BANDWIDTH]` the diagonal.
    band: Vec<[f64; BANDWIDTH + 1]>,
}

impl BandedCholesky {
    /// Factor an SPD matrix given as a lower band (same layout).
    fn factor(mut band: Vec<[f64; BANDWIDTH + 1]>) -> Self {
        let n = band.len();
        for r in 0..n {
            for d in 0..=BANDWIDTH {
                let c = (r + d).checked_sub(BANDWIDTH);
                let Some(c) = c else { continue };
                // L[r][c] = (A[r][c] - sum_k L[r][k] L[c][k]) / L[c][c]
                let mut sum = band[r][d];
                let lo = c.saturating_sub(BANDWIDTH).max(r.saturating_sub(BANDWIDTH));
                for k in lo..c {
                    let lrk = band[r][BANDWIDTH + k - r];
                    let lck = band[c][BANDWIDTH + k - c];
                    sum -= lrk * lck;
                }
                if c == r {
                    band[r][BANDWIDTH] = sum.max(1e-12).sqrt();
                } else {
                    band[r][d] = sum / band[c][BANDWIDTH];
                }
            }
        }
        BandedCholesky { band }
    }

    /// Solve `L L^T x = b` in place.
    fn solve(&self, b: &mut [f64]) {
        let n = self.band.len();
        for r in 0..n {
            let mut sum = b[r];
            for k in r.saturating_sub(BANDWIDTH)..r {
                sum -= self.band[r][BANDWIDTH + k - r] * b[k];
            }
            b[r] = sum / self.band[r][BANDWIDTH];
        }
        for r in (0..n).rev() {
            let mut sum = b[r];
            let hi = (r + BANDWIDTH + 1).min(n);
            for k in r + 1..hi {
                sum -= self.band[k][BANDWIDTH + r - k] * b[k];
            }
            b[r] = sum / self.band[r][BANDWIDTH];
        }
    }
}

impl BandedPreconditioner {
    fn build(
        points: &[Vector3<f64>],
        degree: usize,
        field: &DistanceField,
        dt: f64,
        cfg: &OptimizerConfig,
    ) -> Self {
        let n = points.len() - 1;
        let n_interior = n + 1 - 2 * degree;
        let interior = degree..=n - degree;

        // Smoothness block: 2 * lambda_s * (D^T D) restricted to interior.
        let mut smooth_band = vec![[0.0; BANDWIDTH + 1]; n_interior];
        for i in degree - 1..=n - degree + 1 {
            let stencil = [(i.wrapping_sub(1), 1.0), (i, -2.0), (i + 1, 1.0)];
            for &(j1, c1) in &stencil {
                if !interior.contains(&j1) {
                    continue;
                }
                for &(j2, c2) in &stencil {
                    if !interior.contains(&j2) || j2 > j1 {
                        continue;
                    }
                    let r = j1 - degree;
                    let c = j2 - degree;
                    smooth_band[r][BANDWIDTH + c - r] += 2.0 * cfg.smooth_weight * c1 * c2;
                }
            }
        }

        let dt2 = dt * dt;
        let dt4 = dt2 * dt2;
        let factors = std::array::from_fn(|axis| {
            let mut band = smooth_band.clone();
            for r in 0..n_interior {
                let slot = degree + r;
                let (d, _, _) = field.distance_and_gradient_at(&points[slot]);
                let mut extra = if d <= cfg.clearance_threshold {
                    cfg.collision_weight * 2.0
                } else {
                    0.0
                };
                for other in [slot.wrapping_sub(1), slot + 1] {
                    if other > n {
                        continue;
                    }
                    let v = (points[slot.max(other)][axis] - points[slot.min(other)][axis]) / dt;
                    let curv = 4.0 * (3.0 * v * v - cfg.v_max * cfg.v_max);
                    if v * v > cfg.v_max * cfg.v_max && curv > 0.0 {
                        extra += cfg.dynamics_weight * curv / dt2;
                    }
                }
                for base in slot.saturating_sub(2)..=slot {
                    if base + 2 > n {
                        continue;
                    }
                    let a = (points[base + 2][axis] - 2.0 * points[base + 1][axis]
                        + points[base][axis])
                        / dt2;
                    let curv = 4.0 * (3.0 * a * a - cfg.a_max * cfg.a_max);
                    if a * a > cfg.a_max * cfg.a_max && curv > 0.0 {
                        let stencil = if base + 1 == slot { 4.0 } else { 1.0 };
                        extra += cfg.dynamics_weight * stencil * curv / dt4;
                    }
                }
                band[r][BANDWIDTH] += extra.max(1e-9);
            }
            BandedCholesky::factor(band)
        });
        BandedPreconditioner { factors }
    }

    /// Apply `M^-1` to an interleaved-xyz vector.
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let n_interior = v.len() / 3;
        let mut out = v.clone();
        let mut axis_buf = vec![0.0; n_interior];
        for axis in 0..3 {
            for i in 0..n_interior {
                axis_buf[i] = v[3 * i + axis];
            }
            self.factors[axis].solve(&mut axis_buf);
            for i in 0..n_interior {
                out[3 * i + axis] = axis_buf[i];
            }
        }
        out
    }
}

struct Objective<'a> {
    boundary_lead: Vec<Vector3<f64>>,
    boundary_tail: Vec<Vector3<f64>>,
    n_interior: usize,
    degree: usize,
    dt: f64,
    field: &'a DistanceField,
    cfg: &'a OptimizerConfig,
}

struct Evaluation {
    total: f64,
    smooth: f64,
    collision: f64,
    dynamics: f64,
    grad: DVector<f64>,
    out_of_field: bool,
}

impl<'a> Objective<'a> {
    fn assemble(&self, x: &DVector<f64>) -> Vec<Vector3<f64>> {
        let mut points = self.boundary_lead.clone();
        for i in 0..self.n_interior {
            points.push(Vector3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]));
        }
        points.extend_from_slice(&self.boundary_tail);
        points
    }

    fn eval(&self, x: &DVector<f64>) -> Evaluation {
        let points = self.assemble(x);
        let (f_s, g_s) = cost_smooth(&points, self.degree);
        let (f_c, g_c, out) = cost_collision(
            &points,
            self.degree,
            self.field,
            self.cfg.clearance_threshold,
        );
        let (f_d, g_d) = cost_dynamics(
            &points,
            self.degree,
            self.dt,
            self.cfg.v_max,
            self.cfg.a_max,
        );

        let mut grad = DVector::zeros(3 * self.n_interior);
        for i in 0..self.n_interior {
            let slot = self.degree + i;
            let g = g_s[slot] * self.cfg.smooth_weight
                + g_c[slot] * self.cfg.collision_weight
                + g_d[slot] * self.cfg.dynamics_weight;
            grad[3 * i] = g.x;
            grad[3 * i + 1] = g.y;
            grad[3 * i + 2] = g.z;
        }
        Evaluation {
            total: self.cfg.smooth_weight * f_s
                + self.cfg.collision_weight * f_c
                + self.cfg.dynamics_weight * f_d,
            smooth: f_s,
            collision: f_c,
            dynamics: f_d,
            grad,
            out_of_field: out,
        }
    }
}

const LBFGS_HISTORY: usize = 8;
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

/// Quasi-Newton descent on the interior control points. Boundary control
/// points pass through bit-identical. Stops on gradient norm, iteration
/// count, wall-clock budget, or a failed line search (flagged).
pub fn optimize(
    traj: &BSplineTrajectory,
    field: &DistanceField,
    cfg: &OptimizerConfig,
) -> Result<OptimizeOutcome> {
    assert!(
        cfg.smooth_weight >= 0.0 && cfg.collision_weight >= 0.0 && cfg.dynamics_weight >= 0.0,
        "weights must be nonnegative"
    );
    assert!(
        cfg.clearance_threshold > 0.0,
        "clearance threshold must be positive"
    );
    let degree = traj.degree();
    let points = traj.control_points();
    let n = points.len() - 1;
    if n < 2 * degree || !traj.is_uniform() {
        // Nothing to optimize (or a non-uniform spline slipped through):
        // return the input unchanged.
        return Ok(OptimizeOutcome {
            trajectory: traj.clone(),
            trace: Vec::new(),
            converged: true,
            line_search_failed: false,
            out_of_field: false,
        });
    }
    let knots = traj.knots();
    let dt = knots[degree + 1] - knots[degree];
    let n_interior = n + 1 - 2 * degree;

    let objective = Objective {
        boundary_lead: points[..degree].to_vec(),
        boundary_tail: points[n - degree + 1..].to_vec(),
        n_interior,
        degree,
        dt,
        field,
        cfg,
    };

    let mut x = DVector::zeros(3 * n_interior);
    for i in 0..n_interior {
        let q = points[degree + i];
        x[3 * i] = q.x;
        x[3 * i + 1] = q.y;
        x[3 * i + 2] = q.z;
    }

    let start = Instant::now();
    let mut eval = objective.eval(&x);
    let mut out_of_field = eval.out_of_field;
    let mut trace = vec![TracePoint {
        iter: 0,
        smooth: eval.smooth,
        collision: eval.collision,
        dynamics: eval.dynamics,
        total: eval.total,
        elapsed_s: 0.0,
    }];

    let mut history: Vec<(DVector<f64>, DVector<f64>, f64)> = Vec::new();
    let mut converged = eval.grad.amax() <= cfg.grad_tol;
    let mut line_search_failed = false;

    let mut iter = 0;
    while !converged && iter < cfg.max_iters && start.elapsed().as_secs_f64() < cfg.budget {
        iter += 1;
        let precond = BandedPreconditioner::build(&objective.assemble(&x), degree, field, dt, cfg);
        let direction = lbfgs_direction(&eval.grad, &history, &precond);
        let slope = eval.grad.dot(&direction);
        let (direction, slope, mut step, quasi_newton) = if slope < 0.0 && !history.is_empty() {
            (direction, slope, 1.0, true)
        } else {
            // No curvature pairs yet, or the quasi-Newton direction lost
            // descent on the piecewise-C1 field: preconditioned steepest
            // descent.
            let d = -precond.apply(&eval.grad);
            let s = eval.grad.dot(&d);
            (d, s, 1.0, false)
        };

        let mut accepted = None;
        let mut backtracks = 0;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = &x + &direction * step;
            let cand_eval = objective.eval(&candidate);
            if cand_eval.total <= eval.total + ARMIJO_C1 * step * slope {
                accepted = Some((candidate, cand_eval, step));
                break;
            }
            step *= 0.5;
            backtracks += 1;
        }
        // The kinked field makes the quasi-Newton scale chronically small;
        // when the first candidate passed untouched, forward-track by
        // doubling while the cost keeps strictly improving.
        if backtracks == 0 {
            while let Some((_, best_eval, step)) = &accepted {
                let wider = 2.0 * step;
                let candidate = &x + &direction * wider;
                let cand_eval = objective.eval(&candidate);
                if cand_eval.total < best_eval.total
                    && cand_eval.total <= eval.total + ARMIJO_C1 * wider * slope
                {
                    accepted = Some((candidate, cand_eval, wider));
                } else {
                    break;
                }
            }
        }
        let Some((x_new, eval_new, taken)) = accepted else {
            line_search_failed = true;
            break;
        };
        let _ = (taken, quasi_newton, backtracks);
        let s = &x_new - &x;
        let y = &eval_new.grad - &eval.grad;
        let sy = s.dot(&y);
        if LBFGS_HISTORY > 0 && sy > 1e-10 * s.norm() * y.norm() {
            if history.len() >= LBFGS_HISTORY {
                history.remove(0);
            }
            history.push((s, y, 1.0 / sy));
        }

        x = x_new;
        eval = eval_new;
        out_of_field |= eval.out_of_field;
        trace.push(TracePoint {
            iter,
            smooth: eval.smooth,
            collision: eval.collision,
            dynamics: eval.dynamics,
            total: eval.total,
            elapsed_s: start.elapsed().as_secs_f64(),
        });
        converged = eval.grad.amax() <= cfg.grad_tol;
    }

    let trajectory = traj.with_control_points(objective.assemble(&x))?;
    Ok(OptimizeOutcome {
        trajectory,
        trace,
        converged,
        line_search_failed,
        out_of_field,
    })
}

/// Two-loop recursion for the limited-memory quasi-Newton direction
/// `-H g`, with the banded analytic preconditioner as the initial Hessian.
fn lbfgs_direction(
    grad: &DVector<f64>,
    history: &[(DVector<f64>, DVector<f64>, f64)],
    precond: &BandedPreconditioner,
) -> DVector<f64> {
    let mut q = grad.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let alpha = rho * s.dot(&q);
        q.axpy(-alpha, y, 1.0);
        alphas.push(alpha);
    }
    let mut q = precond.apply(&q);
    for ((s, y, rho), alpha) in history.iter().zip(alphas.iter().rev()) {
        let beta = rho * y.dot(&q);
        q.axpy(alpha - beta, s, 1.0);
    }
    -q
}
