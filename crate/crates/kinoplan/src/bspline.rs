//! Uniform and non-uniform B-spline trajectories.
//!
//! Evaluation uses the constant basis matrix of the uniform representation
//! when all interior knot spans are equal, and de Boor recursion otherwise;
//! both paths agree to rounding on uniform splines and tests hold them to it.
//!
//! Trajectories are value types: every mutation builds a new trajectory, so
//! snapshots can be shared read-only across threads.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::distance_field::DistanceField;
use crate::kino_search::State;
use crate::{Error, Result};

/// Degree used by the planning pipeline. Other degrees are supported by the
/// library for tests.
pub const PIPELINE_DEGREE: usize = 3;

/// Relative tolerance for treating interior knot spans as equal.
const UNIFORM_EPS: f64 = 1e-9;

/// A B-spline trajectory of degree `p` with `N+1` control points and
/// `M+1 = N+p+2` knots, defined for `t` in `[knots[p], knots[M-p]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineTrajectory {
    degree: usize,
    control_points: Vec<Vector3<f64>>,
    knots: Vec<f64>,
}

impl BSplineTrajectory {
    pub fn new(degree: usize, control_points: Vec<Vector3<f64>>, knots: Vec<f64>) -> Result<Self> {
        if !(1..=5).contains(&degree) {
            return Err(Error::InvalidSpline(format!("unsupported degree {degree}")));
        }
        if control_points.len() < degree + 1 {
            return Err(Error::InvalidSpline(format!(
                "need at least {} control points for degree {degree}, got {}",
                degree + 1,
                control_points.len()
            )));
        }
        if knots.len() != control_points.len() + degree + 1 {
            return Err(Error::InvalidSpline(format!(
                "knot count {} != control points {} + degree {} + 1",
                knots.len(),
                control_points.len(),
                degree
            )));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidSpline("knots must be nondecreasing".into()));
        }
        Ok(BSplineTrajectory {
            degree,
            control_points,
            knots,
        })
    }

    /// Uniform spline with knot spacing `dt` whose domain starts at `t0`.
    pub fn uniform(
        degree: usize,
        control_points: Vec<Vector3<f64>>,
        dt: f64,
        t0: f64,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidSpline(format!(
                "knot span must be positive, got {dt}"
            )));
        }
        let m = control_points.len() + degree + 1;
        let knots = (0..m)
            .map(|i| t0 + (i as f64 - degree as f64) * dt)
            .collect();
        Self::new(degree, control_points, knots)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn control_points(&self) -> &[Vector3<f64>] {
        &self.control_points
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Time domain `[knots[p], knots[M-p]]`.
    pub fn domain(&self) -> (f64, f64) {
        (
            self.knots[self.degree],
            self.knots[self.knots.len() - 1 - self.degree],
        )
    }

    pub fn duration(&self) -> f64 {
        let (a, b) = self.domain();
        b - a
    }

    /// True when all interior spans (those covering the domain) are equal.
    pub fn is_uniform(&self) -> bool {
        let p = self.degree;
        let m = self.knots.len() - 1;
        let first = self.knots[p + 1] - self.knots[p];
        if !(first > 0.0) {
            return false;
        }
        (p..m - p)
            .map(|i| self.knots[i + 1] - self.knots[i])
            .all(|s| (s - first).abs() <= UNIFORM_EPS * first.max(1.0))
    }

    /// Index `m` of the knot span containing `t`, clamped so evaluation at
    /// the domain end uses the last span.
    fn span_of(&self, t: f64) -> Result<usize> {
        let p = self.degree;
        let (lo, hi) = self.domain();
        if t < lo - 1e-9 || t > hi + 1e-9 {
            return Err(Error::InvalidSpline(format!(
                "t = {t} outside domain [{lo}, {hi}]"
            )));
        }
        let last = self.knots.len() - 2 - p;
        let mut m = p;
        while m < last && t >= self.knots[m + 1] {
            m += 1;
        }
        Ok(m)
    }

    /// Position / velocity / acceleration at `t`. Uniform splines evaluate
    /// through the basis matrix, non-uniform ones through de Boor.
    pub fn eval(&self, t: f64, order: usize) -> Result<Vector3<f64>> {
        if self.is_uniform() {
            self.eval_matrix(t, order)
        } else {
            self.eval_de_boor(t, order)
        }
    }

    /// Matrix-form evaluation `s(t)^T M_{p+1} q_m`. Only valid for uniform
    /// knots.
    pub fn eval_matrix(&self, t: f64, order: usize) -> Result<Vector3<f64>> {
        if order > 2 {
            return Err(Error::InvalidSpline(
                "derivative order must be 0..=2".into(),
            ));
        }
        let p = self.degree;
        let m = self.span_of(t)?;
        let dt = self.knots[m + 1] - self.knots[m];
        let s = ((t - self.knots[m]) / dt).clamp(0.0, 1.0);
        let basis = basis_matrix(p)?;

        // Power basis of s, differentiated `order` times, with the chain-rule
        // factor 1/dt per derivative order.
        let mut svec = DVector::zeros(p + 1);
        for k in 0..=p {
            svec[k] = match order {
                0 => s.powi(k as i32),
                1 => {
                    if k >= 1 {
                        k as f64 * s.powi(k as i32 - 1)
                    } else {
                        0.0
                    }
                }
                _ => {
                    if k >= 2 {
                        (k * (k - 1)) as f64 * s.powi(k as i32 - 2)
                    } else {
                        0.0
                    }
                }
            };
        }
        let weights = basis.transpose() * svec;
        let mut out = Vector3::zeros();
        for (j, w) in weights.iter().enumerate() {
            out += self.control_points[m - p + j] * *w;
        }
        Ok(out / dt.powi(order as i32))
    }

    /// De Boor evaluation; derivatives evaluate the derivative spline(s).
    pub fn eval_de_boor(&self, t: f64, order: usize) -> Result<Vector3<f64>> {
        match order {
            0 => self.de_boor_point(t),
            1 => self.derivative_spline()?.de_boor_point(t),
            2 => self
                .derivative_spline()?
                .derivative_spline()?
                .de_boor_point(t),
            _ => Err(Error::InvalidSpline(
                "derivative order must be 0..=2".into(),
            )),
        }
    }

    fn de_boor_point(&self, t: f64) -> Result<Vector3<f64>> {
        let p = self.degree;
        let m = self.span_of(t)?;
        let mut d: Vec<Vector3<f64>> = (0..=p).map(|j| self.control_points[m - p + j]).collect();
        for r in 1..=p {
            for j in (r..=p).rev() {
                let i = m - p + j;
                let denom = self.knots[i + p + 1 - r] - self.knots[i];
                let alpha = if denom > 0.0 {
                    (t - self.knots[i]) / denom
                } else {
                    0.0
                };
                d[j] = d[j - 1] * (1.0 - alpha) + d[j] * alpha;
            }
        }
        Ok(d[p])
    }

    /// Control points of the first and second derivative splines,
    /// `V_i = p (Q_{i+1} - Q_i) / (t_{i+p+1} - t_{i+1})` and
    /// `A_i = (p-1) (V_{i+1} - V_i) / (t_{i+p+1} - t_{i+2})`.
    /// For uniform knots these reduce to the divided differences by the span.
    pub fn derivative_control_points(&self) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
        if self.degree < 2 {
            return Err(Error::InvalidSpline(
                "need degree >= 2 for acceleration control points".into(),
            ));
        }
        let p = self.degree as f64;
        let n = self.control_points.len() - 1;
        let mut vel = Vec::with_capacity(n);
        for i in 0..n {
            let denom = self.knots[i + self.degree + 1] - self.knots[i + 1];
            if !(denom > 0.0) {
                return Err(Error::InvalidSpline(format!(
                    "zero knot span in velocity control point {i}"
                )));
            }
            vel.push((self.control_points[i + 1] - self.control_points[i]) * (p / denom));
        }
        let mut acc = Vec::with_capacity(n.saturating_sub(1));
        for i in 0..n.saturating_sub(1) {
            let denom = self.knots[i + self.degree + 1] - self.knots[i + 2];
            if !(denom > 0.0) {
                return Err(Error::InvalidSpline(format!(
                    "zero knot span in acceleration control point {i}"
                )));
            }
            acc.push((vel[i + 1] - vel[i]) * ((p - 1.0) / denom));
        }
        Ok((vel, acc))
    }

    /// The derivative B-spline: degree `p-1`, velocity control points, and
    /// the knot vector with its first and last knots dropped.
    pub fn derivative_spline(&self) -> Result<BSplineTrajectory> {
        let p = self.degree as f64;
        let n = self.control_points.len() - 1;
        let mut vel = Vec::with_capacity(n);
        for i in 0..n {
            let denom = self.knots[i + self.degree + 1] - self.knots[i + 1];
            if !(denom > 0.0) {
                return Err(Error::InvalidSpline(format!(
                    "zero knot span in velocity control point {i}"
                )));
            }
            vel.push((self.control_points[i + 1] - self.control_points[i]) * (p / denom));
        }
        BSplineTrajectory::new(
            self.degree - 1,
            vel,
            self.knots[1..self.knots.len() - 1].to_vec(),
        )
    }

    /// Replace the knot vector, keeping control points. Used by time
    /// adjustment.
    pub fn with_knots(&self, knots: Vec<f64>) -> Result<BSplineTrajectory> {
        BSplineTrajectory::new(self.degree, self.control_points.clone(), knots)
    }

    /// Replace the control points, keeping knots. Used by the optimizer.
    pub fn with_control_points(
        &self,
        control_points: Vec<Vector3<f64>>,
    ) -> Result<BSplineTrajectory> {
        BSplineTrajectory::new(self.degree, control_points, self.knots.clone())
    }

    /// Integral of the squared third derivative over the domain. For cubic
    /// splines the third derivative is constant on each span: the value on
    /// `[t_{i+3}, t_{i+4})` is `(A_{i+1} - A_i) / (t_{i+4} - t_{i+3})`.
    pub fn squared_jerk_integral(&self) -> Result<f64> {
        if self.degree != 3 {
            return Err(Error::InvalidSpline(
                "jerk integral requires degree 3".into(),
            ));
        }
        let (_, acc) = self.derivative_control_points()?;
        let mut total = 0.0;
        for i in 0..acc.len().saturating_sub(1) {
            let span = self.knots[i + 4] - self.knots[i + 3];
            if !(span > 0.0) {
                return Err(Error::InvalidSpline(format!("zero knot span at {}", i + 3)));
            }
            let jerk = (acc[i + 1] - acc[i]) / span;
            total += jerk.norm_squared() * span;
        }
        Ok(total)
    }

    /// State (position + velocity) at `t`.
    pub fn state_at(&self, t: f64) -> Result<State> {
        Ok(State::new(self.eval(t, 0)?, self.eval(t, 1)?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let traj: BSplineTrajectory = serde_json::from_str(text)?;
        BSplineTrajectory::new(traj.degree, traj.control_points, traj.knots)
    }

    /// CSV sample dump: `t,x,y,z,vx,vy,vz,ax,ay,az` at step `dt`.
    pub fn write_csv(&self, path: &Path, dt: f64) -> Result<()> {
        let (lo, hi) = self.domain();
        let n = ((hi - lo) / dt).ceil().max(1.0) as usize;
        let mut text = String::from("t,x,y,z,vx,vy,vz,ax,ay,az\n");
        for k in 0..=n {
            let t = if k == n { hi } else { lo + k as f64 * dt };
            let p = self.eval(t, 0)?;
            let v = self.eval(t, 1)?;
            let a = self.eval(t, 2)?;
            writeln!(
                text,
                "{t},{},{},{},{},{},{},{},{},{}",
                p.x, p.y, p.z, v.x, v.y, v.z, a.x, a.y, a.z
            )
            .expect("string write");
        }
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Constant basis matrix `M_{p+1}` of the uniform B-spline matrix
/// representation, `m_{ij} = C(p,i)/p! * sum_{s=j}^{p} (-1)^{s-j} C(p+1,s-j)
/// (p-s)^{p-i}`.
pub fn basis_matrix(degree: usize) -> Result<DMatrix<f64>> {
    if !(1..=5).contains(&degree) {
        return Err(Error::InvalidSpline(format!("unsupported degree {degree}")));
    }
    let k = degree + 1;
    let p = degree as i64;
    let mut m = DMatrix::zeros(k, k);
    let fact = (1..=p).product::<i64>() as f64;
    for i in 0..k as i64 {
        for j in 0..k as i64 {
            let mut acc = 0.0;
            for s in j..=p {
                let sign = if (s - j) % 2 == 0 { 1.0 } else { -1.0 };
                acc += sign * binomial(p + 1, s - j) * ((p - s) as f64).powi((p - i) as i32);
            }
            m[(i as usize, j as usize)] = binomial(p, i) / fact * acc;
        }
    }
    Ok(m)
}

fn binomial(n: i64, k: i64) -> f64 {
    if k < 0 || k > n {
        return 0.0;
    }
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Per-hull safety verdict from the convex-hull certificate: with clearance
/// `d_c = min` field distance over the hull's control points and gaps
/// `r_j = |Q_{j+1} - Q_j|`, the hull is provably collision-free when
/// `d_c > 0` and every gap is below `d_c / p`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HullVerdict {
    pub segment: usize,
    pub safe: bool,
    pub clearance: f64,
    pub max_gap: f64,
}

/// Certificate check for every curve segment (consecutive `p+1` control
/// points). Sufficient, not necessary: UNSAFE verdicts mean "not certified",
/// not "in collision".
pub fn check_hull_safety(traj: &BSplineTrajectory, field: &DistanceField) -> Vec<HullVerdict> {
    let p = traj.degree();
    let q = traj.control_points();
    let segments = q.len() - p;
    let mut out = Vec::with_capacity(segments);
    for seg in 0..segments {
        let hull = &q[seg..=seg + p];
        let mut clearance = f64::INFINITY;
        for cp in hull {
            let (d, _) = field.distance_at(cp);
            clearance = clearance.min(d);
        }
        let max_gap = hull
            .windows(2)
            .map(|w| (w[1] - w[0]).norm())
            .fold(0.0, f64::max);
        let safe = clearance > 0.0 && max_gap < clearance / p as f64;
        out.push(HullVerdict {
            segment: seg,
            safe,
            clearance,
            max_gap,
        });
    }
    out
}

/// Fit a uniform cubic spline through uniformly spaced state samples.
///
/// With `K` samples there are `K+2` control points; the banded system asks
/// for exact position interpolation at every sample time plus velocity
/// equality at both boundary states. Evaluated at a knot, a uniform cubic is
/// `(Q_{k} + 4 Q_{k+1} + Q_{k+2})/6` with velocity
/// `(Q_{k+2} - Q_{k})/(2 dt)`, which gives the matrix rows.
pub fn fit_from_samples(
    samples: &[(f64, State)],
    dt: f64,
    boundary: (&State, &State),
) -> Result<BSplineTrajectory> {
    let k = samples.len();
    if k < 4 {
        return Err(Error::Fit(format!("need at least 4 samples, got {k}")));
    }
    if !(dt > 0.0) {
        return Err(Error::Fit(format!(
            "sample spacing must be positive, got {dt}"
        )));
    }
    for (i, pair) in samples.windows(2).enumerate() {
        let spacing = pair[1].0 - pair[0].0;
        if (spacing - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(Error::Fit(format!(
                "samples not uniformly spaced at {dt}: gap {spacing} at index {i}"
            )));
        }
    }

    let n_cp = k + 2;
    let mut a = DMatrix::zeros(n_cp, n_cp);
    let mut rhs = DMatrix::zeros(n_cp, 3);
    for (row, (_, state)) in samples.iter().enumerate() {
        a[(row, row)] = 1.0 / 6.0;
        a[(row, row + 1)] = 4.0 / 6.0;
        a[(row, row + 2)] = 1.0 / 6.0;
        for axis in 0..3 {
            rhs[(row, axis)] = state.position[axis];
        }
    }
    let vrow = k;
    a[(vrow, 0)] = -1.0 / (2.0 * dt);
    a[(vrow, 2)] = 1.0 / (2.0 * dt);
    a[(vrow + 1, n_cp - 3)] = -1.0 / (2.0 * dt);
    a[(vrow + 1, n_cp - 1)] = 1.0 / (2.0 * dt);
    for axis in 0..3 {
        rhs[(vrow, axis)] = boundary.0.velocity[axis];
        rhs[(vrow + 1, axis)] = boundary.1.velocity[axis];
    }

    let lu = a.lu();
    let solved = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Fit("singular interpolation system".into()))?;
    let control_points: Vec<Vector3<f64>> = (0..n_cp)
        .map(|i| Vector3::new(solved[(i, 0)], solved[(i, 1)], solved[(i, 2)]))
        .collect();

    let traj = BSplineTrajectory::uniform(PIPELINE_DEGREE, control_points, dt, samples[0].0)?;

    // The fit contract: samples reproduced to 1e-8, boundary states matched.
    for (t, state) in samples {
        let p = traj.eval(*t, 0)?;
        if (p - state.position).norm() > 1e-8 {
            return Err(Error::Fit(format!(
                "fit residual {} at t = {t}",
                (p - state.position).norm()
            )));
        }
    }
    let (lo, hi) = traj.domain();
    if (traj.eval(lo, 1)? - boundary.0.velocity).norm() > 1e-8
        || (traj.eval(hi, 1)? - boundary.1.velocity).norm() > 1e-8
    {
        return Err(Error::Fit("boundary velocity mismatch".into()));
    }
    Ok(traj)
}
