//! Hybrid-state kinodynamic search for a 3-D double integrator.
//!
//! The search expands constant-input motion primitives over a voxel grid,
//! prunes states by the voxel they end in, orders the open set by
//! `g + h` where `h` is the closed-form minimum of the time/control cost of
//! the optimal boundary-value trajectory to the goal, and terminates early
//! when that closed-form trajectory is itself collision-free and dynamically
//! feasible (analytic expansion).
//!
//! A single search is single-threaded; concurrent searches over shared
//! immutable maps are fine.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::hash::{BuildHasherDefault, Hasher};
use std::time::Instant;

use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::voxel_map::{GridIndex, VoxelGrid};

/// Full state of the double integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

impl State {
    pub fn new(position: Vector3<f64>, velocity: Vector3<f64>) -> Self {
        State { position, velocity }
    }

    pub fn at_rest(position: Vector3<f64>) -> Self {
        State {
            position,
            velocity: Vector3::zeros(),
        }
    }
}

/// Closed-form constant-input propagation:
/// `p = p0 + v0 t + u t^2 / 2`, `v = v0 + u t`.
pub fn state_transition(x0: &State, u: &Vector3<f64>, t: f64) -> State {
    State {
        position: x0.position + x0.velocity * t + u * (0.5 * t * t),
        velocity: x0.velocity + u * t,
    }
}

/// One constant-input forward simulation used as a graph edge.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MotionPrimitive {
    pub start: State,
    pub input: Vector3<f64>,
    pub duration: f64,
    pub end: State,
    pub edge_cost: f64,
}

impl MotionPrimitive {
    /// Builds the primitive; the edge cost is `(|u|^2 + rho) * duration`.
    pub fn new(start: State, input: Vector3<f64>, duration: f64, rho: f64) -> Self {
        let end = state_transition(&start, &input, duration);
        MotionPrimitive {
            start,
            input,
            duration,
            end,
            edge_cost: (input.norm_squared() + rho) * duration,
        }
    }

    pub fn state_at(&self, t: f64) -> State {
        state_transition(&self.start, &self.input, t)
    }

    /// Control-effort part of the edge cost, `|u|^2 * duration`.
    pub fn control_cost(&self) -> f64 {
        self.input.norm_squared() * self.duration
    }
}

/// Search parameters. `input_levels` is the per-axis half-count of the input
/// lattice: each axis takes values `{-u_max, ..., -u_max/r, 0, u_max/r, ...,
/// u_max}`, giving `(2r+1)^3` primitives per expansion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    pub u_max: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub input_levels: usize,
    pub tau: f64,
    pub rho: f64,
    pub goal_tolerance: f64,
    pub check_step: f64,
    pub max_expansions: usize,
}

impl SearchConfig {
    /// Defaults for a map of the given resolution: benchmark limits, `rho`
    /// comparable to `u_max^2`, a goal ball of one and a half voxels, and a
    /// collision-sampling step fine enough that no voxel can be skipped
    /// between consecutive samples.
    pub fn for_resolution(resolution: f64) -> Self {
        let u_max = 2.0;
        let v_max = 3.0;
        let tau = 0.5;
        SearchConfig {
            u_max,
            v_max,
            a_max: u_max,
            input_levels: 2,
            tau,
            rho: u_max * u_max,
            goal_tolerance: 1.5 * resolution,
            check_step: (tau / 10.0).min(resolution / v_max),
            max_expansions: 300_000,
        }
    }
}

/// The closed-form cubic-per-axis trajectory between two full states over a
/// fixed duration, minimal in integrated squared input.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AnalyticSegment {
    pub start: State,
    pub alpha: Vector3<f64>,
    pub beta: Vector3<f64>,
    pub duration: f64,
}

impl AnalyticSegment {
    /// Coefficients for reaching `to` from `from` in exactly `duration`:
    /// per axis, `[alpha; beta] = T^-3 [[-12, 6T], [6T, -2T^2]] [dp - v0 T; dv]`.
    pub fn between(from: &State, to: &State, duration: f64) -> Self {
        let t = duration;
        let dp = to.position - from.position - from.velocity * t;
        let dv = to.velocity - from.velocity;
        let t3 = t * t * t;
        let alpha = (dp * -12.0 + dv * (6.0 * t)) / t3;
        let beta = (dp * (6.0 * t) - dv * (2.0 * t * t)) / t3;
        AnalyticSegment {
            start: *from,
            alpha,
            beta,
            duration,
        }
    }

    fn zero_length(at: &State) -> Self {
        AnalyticSegment {
            start: *at,
            alpha: Vector3::zeros(),
            beta: Vector3::zeros(),
            duration: 0.0,
        }
    }

    pub fn state_at(&self, t: f64) -> State {
        State {
            position: self.start.position
                + self.start.velocity * t
                + self.beta * (0.5 * t * t)
                + self.alpha * (t * t * t / 6.0),
            velocity: self.start.velocity + self.beta * t + self.alpha * (0.5 * t * t),
        }
    }

    pub fn accel_at(&self, t: f64) -> Vector3<f64> {
        self.beta + self.alpha * t
    }

    pub fn end_state(&self) -> State {
        self.state_at(self.duration)
    }

    /// Integrated squared input over the segment,
    /// sum per axis of `alpha^2 T^3 / 3 + alpha beta T^2 + beta^2 T`.
    pub fn control_cost(&self) -> f64 {
        let t = self.duration;
        let mut c = 0.0;
        for a in 0..3 {
            let al = self.alpha[a];
            let be = self.beta[a];
            c += al * al * t * t * t / 3.0 + al * be * t * t + be * be * t;
        }
        c
    }
}

/// How the returned path attains its end state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GoalAttainment {
    /// The analytic expansion to the exact goal state passed its checks.
    Analytic,
    /// A primitive chain ended within the goal position tolerance.
    WithinTolerance,
    /// The search stopped at the sensing-horizon shell; the end state is a
    /// local goal short of the global one.
    HorizonBoundary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResult {
    pub primitives: Vec<MotionPrimitive>,
    pub analytic_tail: Option<AnalyticSegment>,
    pub start: State,
    pub end: State,
    /// Sum of edge costs plus the tail's full cost (control + rho * T).
    pub total_cost: f64,
    /// Integrated squared input only, without the time weight.
    pub control_cost: f64,
    pub duration: f64,
    pub expansions: usize,
    pub wall_time_s: f64,
    pub attainment: GoalAttainment,
}

impl SearchResult {
    pub fn state_at(&self, t: f64) -> State {
        let mut remaining = t.max(0.0);
        for prim in &self.primitives {
            if remaining <= prim.duration {
                return prim.state_at(remaining);
            }
            remaining -= prim.duration;
        }
        if let Some(tail) = &self.analytic_tail {
            return tail.state_at(remaining.min(tail.duration));
        }
        self.end
    }

    /// Uniformly samples the primitive chain and analytic tail.
    ///
    /// The effective step is `duration / ceil(duration / dt)` so the samples
    /// are exactly uniform and the first/last ones land on the start and end
    /// states exactly.
    pub fn sample(&self, dt: f64) -> Vec<(f64, State)> {
        assert!(dt > 0.0, "sample step must be positive");
        if self.duration <= 0.0 {
            return vec![(0.0, self.start)];
        }
        let n = (self.duration / dt - 1e-9).ceil().max(1.0) as usize;
        let step = self.duration / n as f64;
        let mut out = Vec::with_capacity(n + 1);
        out.push((0.0, self.start));
        for k in 1..n {
            let t = k as f64 * step;
            out.push((t, self.state_at(t)));
        }
        out.push((self.duration, self.end));
        out
    }
}

/// Distinguishable search failures.
#[derive(thiserror::Error, Debug, Clone, PartialEq, Eq)]
pub enum SearchFailure {
    #[error("search failure: start-in-collision")]
    StartInCollision,
    #[error("search failure: open set exhausted after {expansions} expansions")]
    OpenSetExhausted { expansions: usize },
    #[error("search failure: expansion limit {0} exceeded")]
    MaxExpansionsExceeded(usize),
}

/// Sensing-sphere restriction for receding-horizon planning. Primitives may
/// not end outside the sphere, and a pop inside the boundary shell (one
/// primitive reach wide) ends the search with a local goal.
#[derive(Debug, Clone, Copy)]
pub struct Horizon {
    pub center: Vector3<f64>,
    pub radius: f64,
}

impl Horizon {
    fn contains(&self, p: &Vector3<f64>) -> bool {
        (p - self.center).norm() <= self.radius
    }
}

/// Minimum of the combined time/control cost
/// `C(T) = rho T + integral |u|^2` over the duration `T` of the optimal
/// boundary-value trajectory from `current` to `goal`. Returns `(cost, T)`.
///
/// Substituting the closed-form coefficients gives
/// `C(T) = rho T + k3/T^3 + k2/T^2 + k1/T` with
/// `k3 = 12 |dp|^2`, `k2 = -12 dp.(v0+v1)`, `k1 = 4 (|v0|^2 + v0.v1 + |v1|^2)`,
/// so the stationary points solve `rho T^4 - k1 T^2 - 2 k2 T - 3 k3 = 0`.
/// The candidates come from the companion-matrix eigenvalues of that quartic;
/// when no positive real root survives, a bounded golden-section scan over
/// `(0, T_FALLBACK_CAP]` stands in.
pub fn heuristic(current: &State, goal: &State, rho: f64) -> (f64, f64) {
    assert!(rho > 0.0, "rho must be positive");
    let dp = goal.position - current.position;
    let v0 = current.velocity;
    let v1 = goal.velocity;

    if dp.norm() < 1e-12 && (v1 - v0).norm() < 1e-12 && v0.norm() < 1e-12 {
        return (0.0, 0.0);
    }

    let k3 = 12.0 * dp.norm_squared();
    let k2 = -12.0 * dp.dot(&(v0 + v1));
    let k1 = 4.0 * (v0.norm_squared() + v0.dot(&v1) + v1.norm_squared());
    let cost = |t: f64| {
        let inv = 1.0 / t;
        rho * t + ((k3 * inv + k2) * inv + k1) * inv
    };

    let mut best: Option<(f64, f64)> = None;
    let mut roots = [0.0f64; 4];
    let n =
        depressed_quartic_positive_roots(-k1 / rho, -2.0 * k2 / rho, -3.0 * k3 / rho, &mut roots);
    for &t in &roots[..n] {
        let c = cost(t);
        if c.is_finite() && c >= 0.0 && best.is_none_or(|(bc, _)| c < bc) {
            best = Some((c, t));
        }
    }
    match best {
        Some((c, t)) => (c, t),
        None => golden_section_min(&cost, 1e-6, T_FALLBACK_CAP),
    }
}

const T_FALLBACK_CAP: f64 = 1.0e3;

fn newton_polish(t: f64, p: f64, q: f64, r: f64) -> f64 {
    let mut t = t;
    for _ in 0..3 {
        let f = ((t * t + p) * t + q) * t + r;
        let df = (4.0 * t * t + 2.0 * p) * t + q;
        if df.abs() <= 1e-300 {
            break;
        }
        let next = t - f / df;
        if !(next > 0.0) || !next.is_finite() {
            break;
        }
        t = next;
    }
    t
}

/// Positive real roots of the depressed quartic `x^4 + p x^2 + q x + r`,
/// by factoring into two quadratics through a real root of the resolvent
/// cubic. Writes into `roots`, returns the count.
///
/// This is the hot path of the search (hundreds of calls per expansion);
/// tests hold it equal to the companion-matrix eigenvalue route.
fn depressed_quartic_positive_roots(p: f64, q: f64, r: f64, roots: &mut [f64; 4]) -> usize {
    let mut n = 0;
    let mut push = |x: f64| {
        let x = newton_polish(x, p, q, r);
        if x > 1e-10 && x.is_finite() {
            roots[n] = x;
            n += 1;
        }
    };

    // Near-biquadratic quartics lose the resolvent split to cancellation;
    // the neglected q x term shifts roots by O(q / f'), which the Newton
    // polish in `push` removes.
    if q.abs() < 1e-6 * (1.0 + p.abs() + r.abs()) {
        // Biquadratic: x^2 = y with y^2 + p y + r = 0.
        let disc = p * p - 4.0 * r;
        if disc >= 0.0 {
            let s = disc.sqrt();
            for y in [(-p + s) / 2.0, (-p - s) / 2.0] {
                if y > 0.0 {
                    push(y.sqrt());
                }
            }
        }
        return n;
    }

    // Resolvent cubic z^3 - p z^2 - 4 r z + (4 p r - q^2) = 0; any real root
    // with z > p splits the quartic into
    // (x^2 + s x + z/2 - q/(2s)) (x^2 - s x + z/2 + q/(2s)), s = sqrt(z - p).
    let z = largest_real_cubic_root(-p, -4.0 * r, 4.0 * p * r - q * q);
    let s2 = z - p;
    if s2 <= 0.0 {
        // Degenerate split (repeated complex pairs); no real roots to find.
        return n;
    }
    let s = s2.sqrt();
    let half_z = 0.5 * z;
    let shift = 0.5 * q / s;
    // x^2 + s x + (half_z - shift) = 0
    let d1 = s * s - 4.0 * (half_z - shift);
    if d1 >= 0.0 {
        let sd = d1.sqrt();
        push((-s + sd) / 2.0);
        push((-s - sd) / 2.0);
    }
    // x^2 - s x + (half_z + shift) = 0
    let d2 = s * s - 4.0 * (half_z + shift);
    if d2 >= 0.0 {
        let sd = d2.sqrt();
        push((s + sd) / 2.0);
        push((s - sd) / 2.0);
    }
    n
}

/// Largest real root of `z^3 + a z^2 + b z + c`, by Cardano/trigonometric
/// cases on the depressed cubic.
fn largest_real_cubic_root(a: f64, b: f64, c: f64) -> f64 {
    let shift = a / 3.0;
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let disc = (q / 2.0) * (q / 2.0) + (p / 3.0) * (p / 3.0) * (p / 3.0);
    if disc > 0.0 {
        // One real root.
        let sq = disc.sqrt();
        let u = (-q / 2.0 + sq).cbrt();
        let v = (-q / 2.0 - sq).cbrt();
        u + v - shift
    } else {
        // Three real roots; take the largest.
        let m = 2.0 * (-p / 3.0).max(0.0).sqrt();
        if m == 0.0 {
            return -shift;
        }
        let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        m * theta.cos() - shift
    }
}

/// Positive real roots of the monic quartic
/// `x^4 + c3 x^3 + c2 x^2 + c1 x + c0`, from the eigenvalues of its
/// companion matrix. Reference implementation used by tests to pin the
/// closed-form solver.
pub fn companion_quartic_positive_roots(c3: f64, c2: f64, c1: f64, c0: f64) -> Vec<f64> {
    #[rustfmt::skip]
    let companion = Matrix4::new(
        0.0, 0.0, 0.0, -c0,
        1.0, 0.0, 0.0, -c1,
        0.0, 1.0, 0.0, -c2,
        0.0, 0.0, 1.0, -c3,
    );
    companion
        .complex_eigenvalues()
        .iter()
        .filter_map(|e| {
            let near_real = e.im.abs() <= 1e-8 * e.re.abs().max(1.0);
            (near_real && e.re > 1e-10).then_some(e.re)
        })
        .collect()
}

/// Bounded golden-section minimization after a coarse log-spaced scan.
fn golden_section_min(cost: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    let mut best_t = lo;
    let mut best_c = f64::INFINITY;
    let n = 256;
    for i in 0..=n {
        let t = lo * (hi / lo).powf(i as f64 / n as f64);
        let c = cost(t);
        if c < best_c {
            best_c = c;
            best_t = t;
        }
    }
    let mut a = best_t / 2.0;
    let mut b = (best_t * 2.0).min(hi);
    let phi = 0.618_033_988_749_894_9;
    for _ in 0..80 {
        let m1 = b - phi * (b - a);
        let m2 = a + phi * (b - a);
        if cost(m1) < cost(m2) {
            b = m2;
        } else {
            a = m1;
        }
    }
    let t = 0.5 * (a + b);
    (cost(t), t)
}

/// All `(2r+1)^3` constant-input primitives of duration `tau` from `state`.
pub fn expand(state: &State, cfg: &SearchConfig) -> Vec<MotionPrimitive> {
    let r = cfg.input_levels as i64;
    let scale = cfg.u_max / r as f64;
    let mut out = Vec::with_capacity(((2 * r + 1) * (2 * r + 1) * (2 * r + 1)) as usize);
    for ix in -r..=r {
        for iy in -r..=r {
            for iz in -r..=r {
                let u = Vector3::new(ix as f64, iy as f64, iz as f64) * scale;
                out.push(MotionPrimitive::new(*state, u, cfg.tau, cfg.rho));
            }
        }
    }
    out
}

/// True iff every sampled position along the primitive (step `check_step`,
/// endpoints included) lies in a free voxel and the velocity stays within
/// `v_max` per axis. The input bound holds by construction of the lattice.
pub fn check_feasible(prim: &MotionPrimitive, map: &VoxelGrid, cfg: &SearchConfig) -> bool {
    let v_bound = cfg.v_max * (1.0 + 1e-9);
    // Velocity is linear in t, so the per-axis extrema sit at the endpoints;
    // checking them is exactly the all-samples check.
    if prim.start.velocity.amax() > v_bound || prim.end.velocity.amax() > v_bound {
        return false;
    }
    let steps = (prim.duration / cfg.check_step).ceil().max(1.0) as usize;
    for k in 0..=steps {
        let t = prim.duration * k as f64 / steps as f64;
        if !map.is_free_world(&prim.state_at(t).position) {
            return false;
        }
    }
    true
}

/// Attempts the closed-form trajectory from `from` straight to `goal` over
/// the heuristic-optimal duration. Returns it iff the exact per-axis
/// velocity/acceleration extrema stay in bounds and the sampled collision
/// check passes.
pub fn analytic_expand(
    from: &State,
    goal: &State,
    map: &VoxelGrid,
    cfg: &SearchConfig,
) -> Option<AnalyticSegment> {
    let (_, t_h) = heuristic(from, goal, cfg.rho);
    analytic_expand_with_time(from, goal, t_h, map, cfg)
}

/// [`analytic_expand`] with the optimal duration already known (the search
/// caches it alongside the heuristic value).
pub fn analytic_expand_with_time(
    from: &State,
    goal: &State,
    t_h: f64,
    map: &VoxelGrid,
    cfg: &SearchConfig,
) -> Option<AnalyticSegment> {
    if (from.position - goal.position).norm() < 1e-12
        && (from.velocity - goal.velocity).norm() < 1e-12
    {
        return Some(AnalyticSegment::zero_length(from));
    }
    if !(t_h > 0.0) || !t_h.is_finite() {
        return None;
    }
    let seg = AnalyticSegment::between(from, goal, t_h);
    let v_bound = cfg.v_max * (1.0 + 1e-9);
    let a_bound = cfg.a_max * (1.0 + 1e-9);
    // Per axis, acceleration is linear in t (extrema at the ends) and
    // velocity is quadratic (ends plus one interior stationary point), so the
    // dynamic bounds check is exact and cheap; it culls most far shots before
    // the collision sampling below.
    for axis in 0..3 {
        let al = seg.alpha[axis];
        let be = seg.beta[axis];
        let v0 = from.velocity[axis];
        if be.abs().max((be + al * t_h).abs()) > a_bound {
            return None;
        }
        let mut v_peak = v0.abs().max((v0 + be * t_h + 0.5 * al * t_h * t_h).abs());
        if al.abs() > 0.0 {
            let t_star = -be / al;
            if t_star > 0.0 && t_star < t_h {
                v_peak = v_peak.max((v0 + be * t_star + 0.5 * al * t_star * t_star).abs());
            }
        }
        if v_peak > v_bound {
            return None;
        }
    }
    let steps = (t_h / cfg.check_step).ceil().max(1.0) as usize;
    for k in 0..=steps {
        let t = t_h * k as f64 / steps as f64;
        if !map.is_free_world(&seg.state_at(t).position) {
            return None;
        }
    }
    Some(seg)
}

struct Node {
    state: State,
    g: f64,
    /// Cached heuristic time-to-goal, reused by the analytic expansion.
    t_h: f64,
    parent: Option<usize>,
    primitive: Option<MotionPrimitive>,
}

struct OpenEntry {
    f: f64,
    h: f64,
    seq: u64,
    node: usize,
    g: f64,
}

impl PartialEq for OpenEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for OpenEntry {}

impl PartialOrd for OpenEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OpenEntry {
    // Reversed lexicographic (f, h, seq) so the max-heap pops the minimum.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then(other.h.total_cmp(&self.h))
            .then(other.seq.cmp(&self.seq))
    }
}

/// Per-equivalence-class bookkeeping (best g, closed flag).
struct ClassRecord {
    g: f64,
    closed: bool,
}

/// Multiply-xor hasher for the hot class lookups; the default SipHash
/// dominates the per-expansion cost otherwise.
#[derive(Default)]
struct FxHasher(u64);

impl Hasher for FxHasher {
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.write_u64(b as u64);
        }
    }
    fn write_u64(&mut self, v: u64) {
        self.0 = (self.0.rotate_left(5) ^ v).wrapping_mul(0x51_7c_c1_b7_27_22_0a_95);
    }
    fn write_usize(&mut self, v: usize) {
        self.write_u64(v as u64);
    }
    fn write_i64(&mut self, v: i64) {
        self.write_u64(v as u64);
    }
    fn write_u8(&mut self, v: u8) {
        self.write_u64(v as u64);
    }
    fn write_u32(&mut self, v: u32) {
        self.write_u64(v as u64);
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

type ClassMap = HashMap<ClassKey, ClassRecord, BuildHasherDefault<FxHasher>>;

/// Equivalence key: the voxel, optionally refined by a fine velocity bin for
/// the pruning-disabled comparison runs.
type ClassKey = (GridIndex, Option<[i64; 3]>);

/// Kinodynamic search from `start` toward `goal` over an inflated map.
pub fn search(
    start: &State,
    goal: &State,
    map: &VoxelGrid,
    cfg: &SearchConfig,
) -> Result<SearchResult, SearchFailure> {
    search_impl(start, goal, map, cfg, None, true)
}

/// Horizon-restricted search used by the receding-horizon replanner.
pub fn search_local(
    start: &State,
    goal: &State,
    map: &VoxelGrid,
    cfg: &SearchConfig,
    horizon: &Horizon,
) -> Result<SearchResult, SearchFailure> {
    search_impl(start, goal, map, cfg, Some(*horizon), true)
}

/// Search with voxel pruning effectively disabled (states are additionally
/// distinguished by a fine velocity bin). Testing aid for quantifying the
/// cost of pruning; not for production use.
pub fn search_unpruned(
    start: &State,
    goal: &State,
    map: &VoxelGrid,
    cfg: &SearchConfig,
) -> Result<SearchResult, SearchFailure> {
    search_impl(start, goal, map, cfg, None, false)
}

fn search_impl(
    start: &State,
    goal: &State,
    map: &VoxelGrid,
    cfg: &SearchConfig,
    horizon: Option<Horizon>,
    prune: bool,
) -> Result<SearchResult, SearchFailure> {
    assert!(cfg.input_levels >= 1, "input_levels must be >= 1");
    assert!(cfg.tau > 0.0, "tau must be positive");
    assert!(cfg.rho > 0.0, "rho must be positive");
    assert!(cfg.check_step < cfg.tau, "check_step must be below tau");
    let t_start = Instant::now();

    let class_of = |s: &State| -> Option<ClassKey> {
        let voxel = map.world_to_index(&s.position)?;
        if map.is_occupied(voxel) {
            return None;
        }
        let vel_bin = (!prune).then(|| {
            [
                (s.velocity.x / 0.01).round() as i64,
                (s.velocity.y / 0.01).round() as i64,
                (s.velocity.z / 0.01).round() as i64,
            ]
        });
        Some((voxel, vel_bin))
    };

    let start_key = class_of(start).ok_or(SearchFailure::StartInCollision)?;

    // The analytic expansion may only target a goal inside the horizon;
    // otherwise it would commit the path to space the robot has not seen.
    let analytic_allowed = horizon.is_none_or(|hz| hz.contains(&goal.position));
    // Shell one primitive reach wide: a primitive cannot jump across it, so a
    // popped node beyond it marks the first best-cost horizon crossing.
    let shell_inner = horizon.map(|hz| hz.radius - cfg.tau * cfg.v_max);

    let (h0, t_h0) = heuristic(start, goal, cfg.rho);
    let mut nodes: Vec<Node> = vec![Node {
        state: *start,
        g: 0.0,
        t_h: t_h0,
        parent: None,
        primitive: None,
    }];
    let mut classes: ClassMap = ClassMap::default();
    classes.insert(
        start_key,
        ClassRecord {
            g: 0.0,
            closed: false,
        },
    );
    let mut open = BinaryHeap::new();
    let mut seq = 0u64;
    open.push(OpenEntry {
        f: h0,
        h: h0,
        seq,
        node: 0,
        g: 0.0,
    });

    let mut expansions = 0usize;
    let mut batch: Vec<(ClassKey, MotionPrimitive, f64, f64, f64)> = Vec::with_capacity(128);
    let mut batch_index: HashMap<ClassKey, usize, BuildHasherDefault<FxHasher>> =
        HashMap::with_capacity_and_hasher(256, BuildHasherDefault::default());

    while let Some(entry) = open.pop() {
        let state = nodes[entry.node].state;
        let key = class_of(&state).expect("pushed nodes have a free class");
        {
            let rec = classes.get(&key).expect("pushed nodes are recorded");
            if rec.closed || entry.g > rec.g + 1e-12 {
                continue; // lazy deletion of stale entries
            }
        }
        classes.get_mut(&key).unwrap().closed = true;

        if (state.position - goal.position).norm() <= cfg.goal_tolerance {
            return Ok(retrieve(
                &nodes,
                entry.node,
                None,
                GoalAttainment::WithinTolerance,
                start,
                expansions,
                t_start,
                cfg.rho,
            ));
        }
        if let (Some(hz), Some(inner)) = (horizon, shell_inner) {
            let dist = (state.position - hz.center).norm();
            if !analytic_allowed && dist >= inner && entry.node != 0 {
                return Ok(retrieve(
                    &nodes,
                    entry.node,
                    None,
                    GoalAttainment::HorizonBoundary,
                    start,
                    expansions,
                    t_start,
                    cfg.rho,
                ));
            }
        }
        if analytic_allowed {
            let t_h = nodes[entry.node].t_h;
            if let Some(tail) = analytic_expand_with_time(&state, goal, t_h, map, cfg) {
                return Ok(retrieve(
                    &nodes,
                    entry.node,
                    Some(tail),
                    GoalAttainment::Analytic,
                    start,
                    expansions,
                    t_start,
                    cfg.rho,
                ));
            }
        }

        expansions += 1;
        if expansions > cfg.max_expansions {
            return Err(SearchFailure::MaxExpansionsExceeded(cfg.max_expansions));
        }

        // Expand, then prune primitives ending in the same class keeping the
        // smallest f, then run feasibility and relaxation on the survivors.
        // The batch is sorted by class so the push order is deterministic
        // across runs.
        let parent_g = nodes[entry.node].g;
        batch.clear();
        batch_index.clear();
        let r = cfg.input_levels as i64;
        let scale = cfg.u_max / r as f64;
        for ix in -r..=r {
            for iy in -r..=r {
                for iz in -r..=r {
                    let u = Vector3::new(ix as f64, iy as f64, iz as f64) * scale;
                    let prim = MotionPrimitive::new(state, u, cfg.tau, cfg.rho);
                    let Some(end_key) = class_of(&prim.end) else {
                        continue;
                    };
                    if let Some(hz) = horizon {
                        if !hz.contains(&prim.end.position) {
                            continue;
                        }
                    }
                    // A candidate ending in a closed class dies later regardless of
                    // how the batch prune goes, so skip it before the heuristic.
                    if classes.get(&end_key).is_some_and(|rec| rec.closed) {
                        continue;
                    }
                    let g_new = parent_g + prim.edge_cost;
                    let (h, t_h) = heuristic(&prim.end, goal, cfg.rho);
                    let f_new = g_new + h;
                    match batch_index.get(&end_key) {
                        Some(&at) => {
                            if f_new < batch[at].2 {
                                batch[at] = (end_key, prim, f_new, h, t_h);
                            }
                        }
                        None => {
                            batch_index.insert(end_key, batch.len());
                            batch.push((end_key, prim, f_new, h, t_h));
                        }
                    }
                }
            }
        }

        for &(end_key, prim, f_new, h, t_h) in &batch {
            // Relaxation first: a candidate that cannot improve the class's
            // best g dies whether or not it is feasible, and the feasibility
            // sampling is the expensive half.
            let g_new = parent_g + prim.edge_cost;
            if let Some(rec) = classes.get(&end_key) {
                if rec.closed || g_new >= rec.g {
                    continue;
                }
            }
            if !check_feasible(&prim, map, cfg) {
                continue;
            }
            let node_id = nodes.len();
            nodes.push(Node {
                state: prim.end,
                g: g_new,
                t_h,
                parent: Some(entry.node),
                primitive: Some(prim),
            });
            classes.insert(
                end_key,
                ClassRecord {
                    g: g_new,
                    closed: false,
                },
            );
            seq += 1;
            open.push(OpenEntry {
                f: f_new,
                h,
                seq,
                node: node_id,
                g: g_new,
            });
        }
    }

    Err(SearchFailure::OpenSetExhausted { expansions })
}

#[allow(clippy::too_many_arguments)]
fn retrieve(
    nodes: &[Node],
    end_node: usize,
    tail: Option<AnalyticSegment>,
    attainment: GoalAttainment,
    start: &State,
    expansions: usize,
    t_start: Instant,
    rho: f64,
) -> SearchResult {
    let mut primitives = Vec::new();
    let mut cursor = end_node;
    while let Some(parent) = nodes[cursor].parent {
        primitives.push(
            nodes[cursor]
                .primitive
                .expect("non-root nodes carry a primitive"),
        );
        cursor = parent;
    }
    primitives.reverse();

    let mut control_cost: f64 = primitives.iter().map(|p| p.control_cost()).sum();
    let mut total_cost = nodes[end_node].g;
    let mut duration: f64 = primitives.iter().map(|p| p.duration).sum();
    let mut end = nodes[end_node].state;
    if let Some(tail) = &tail {
        control_cost += tail.control_cost();
        total_cost += tail.control_cost() + rho * tail.duration;
        duration += tail.duration;
        end = tail.end_state();
    }

    SearchResult {
        primitives,
        analytic_tail: tail,
        start: *start,
        end,
        total_cost,
        control_cost,
        duration,
        expansions,
        wall_time_s: t_start.elapsed().as_secs_f64(),
        attainment,
    }
}
