//! Euclidean distance field over a voxel grid with trilinearly interpolated
//! distance and gradient queries.
//!
//! The transform runs three sequential 1-D lower-envelope passes over squared
//! distances, one per axis, and is exact: every stored value equals the
//! brute-force minimum over occupied voxel centers up to floating-point
//! rounding of the final square root.
//!
//! Fields are immutable after construction; the replanner swaps in updated
//! fields built by [`DistanceField::update_with_new_sites`], which merges the
//! exact transform of newly revealed obstacles into a capped field.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::voxel_map::{GridIndex, VoxelGrid};
use crate::Result;

/// Per-voxel Euclidean distances (meters, voxel center to nearest occupied
/// voxel center) plus grid metadata for interpolated queries.
#[derive(Debug, Clone)]
pub struct DistanceField {
    origin: Vector3<f64>,
    resolution: f64,
    dims: [usize; 3],
    distances: Vec<f64>,
    cap: f64,
}

impl DistanceField {
    /// Exact transform of `grid`, uncapped. A grid with no occupied voxel
    /// yields `+inf` everywhere.
    pub fn build(grid: &VoxelGrid) -> DistanceField {
        Self::build_capped(grid, f64::INFINITY)
    }

    /// Exact transform with free-space distances clamped to `cap`. Beyond the
    /// collision-cost threshold exact magnitudes are irrelevant, and a finite
    /// cap is what makes the incremental update windowable.
    pub fn build_capped(grid: &VoxelGrid, cap: f64) -> DistanceField {
        let dims = grid.dims();
        let d2 = squared_voxel_distances(grid.occupancy(), dims);
        let res = grid.resolution();
        let distances = d2.iter().map(|&v| (res * v.sqrt()).min(cap)).collect();
        DistanceField {
            origin: grid.origin(),
            resolution: res,
            dims,
            distances,
            cap,
        }
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    /// False when the source grid had no occupied voxel, in which case the
    /// whole field is the cap (or infinite) and queries carry no obstacle
    /// information.
    pub fn has_sites(&self) -> bool {
        self.distances.iter().any(|&d| d == 0.0)
    }

    #[inline]
    fn linear(&self, idx: GridIndex) -> usize {
        (idx[2] * self.dims[1] + idx[1]) * self.dims[0] + idx[0]
    }

    pub fn distance_at_index(&self, idx: GridIndex) -> f64 {
        self.distances[self.linear(idx)]
    }

    /// Merge newly occupied voxels into a capped field.
    ///
    /// New obstacles only decrease distances, and only within `cap` of
    /// themselves, so an exact windowed transform of the new sites followed by
    /// an elementwise minimum reproduces the full capped rebuild exactly.
    pub fn update_with_new_sites(&mut self, new_sites: &[GridIndex]) {
        if new_sites.is_empty() {
            return;
        }
        if !self.cap.is_finite() {
            // No finite influence radius to window on; recompute over the
            // whole lattice instead.
            let mut occ = vec![false; self.distances.len()];
            for (lin, d) in self.distances.iter().enumerate() {
                if *d == 0.0 {
                    occ[lin] = true;
                }
            }
            for &s in new_sites {
                occ[self.linear(s)] = true;
            }
            let d2 = squared_voxel_distances(&occ, self.dims);
            for (dst, &v) in self.distances.iter_mut().zip(d2.iter()) {
                *dst = self.resolution * v.sqrt();
            }
            return;
        }

        let margin = (self.cap / self.resolution).ceil() as i64 + 1;
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for s in new_sites {
            for a in 0..3 {
                lo[a] = lo[a].min(s[a] as i64);
                hi[a] = hi[a].max(s[a] as i64);
            }
        }
        let mut wlo = [0usize; 3];
        let mut wdims = [0usize; 3];
        for a in 0..3 {
            let l = (lo[a] - margin).max(0) as usize;
            let h = ((hi[a] + margin) as usize).min(self.dims[a] - 1);
            wlo[a] = l;
            wdims[a] = h - l + 1;
        }

        let mut occ = vec![false; wdims[0] * wdims[1] * wdims[2]];
        for s in new_sites {
            let wi = [(s[0] - wlo[0]), (s[1] - wlo[1]), (s[2] - wlo[2])];
            occ[(wi[2] * wdims[1] + wi[1]) * wdims[0] + wi[0]] = true;
        }
        let d2 = squared_voxel_distances(&occ, wdims);
        for wz in 0..wdims[2] {
            for wy in 0..wdims[1] {
                for wx in 0..wdims[0] {
                    let v = d2[(wz * wdims[1] + wy) * wdims[0] + wx];
                    let d = (self.resolution * v.sqrt()).min(self.cap);
                    let lin = self.linear([wlo[0] + wx, wlo[1] + wy, wlo[2] + wz]);
                    if d < self.distances[lin] {
                        self.distances[lin] = d;
                    }
                }
            }
        }
    }

    /// Node coordinates of `p` (voxel-center lattice), clamped to the
    /// interpolable interior. The flag is true when `p` was outside it.
    fn node_coords(&self, p: &Vector3<f64>) -> ([f64; 3], bool) {
        let mut u = [0.0f64; 3];
        let mut out = false;
        for a in 0..3 {
            let raw = (p[a] - self.origin[a]) / self.resolution - 0.5;
            let max = (self.dims[a] - 1) as f64;
            if raw < 0.0 || raw > max {
                out = true;
            }
            u[a] = raw.clamp(0.0, max);
        }
        (u, out)
    }

    #[inline]
    fn corner(&self, i: usize, j: usize, k: usize) -> f64 {
        self.distances[(k * self.dims[1] + j) * self.dims[0] + i]
    }

    /// Cell base index and in-cell fractions for interpolation.
    fn cell(&self, u: &[f64; 3]) -> ([usize; 3], [f64; 3]) {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let mut i = u[a].floor() as usize;
            if i + 1 >= self.dims[a] {
                i = self.dims[a].saturating_sub(2);
            }
            base[a] = i;
            frac[a] = u[a] - i as f64;
        }
        (base, frac)
    }

    /// Trilinearly interpolated distance at `p`. Queries outside the
    /// interpolable interior (half-voxel inset from the grid faces) return the
    /// clamped-boundary value with the flag set.
    pub fn distance_at(&self, p: &Vector3<f64>) -> (f64, bool) {
        let (u, out) = self.node_coords(p);
        let (b, f) = self.cell(&u);
        let c = |di: usize, dj: usize, dk: usize| self.corner(b[0] + di, b[1] + dj, b[2] + dk);
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let d00 = lerp(c(0, 0, 0), c(1, 0, 0), f[0]);
        let d10 = lerp(c(0, 1, 0), c(1, 1, 0), f[0]);
        let d01 = lerp(c(0, 0, 1), c(1, 0, 1), f[0]);
        let d11 = lerp(c(0, 1, 1), c(1, 1, 1), f[0]);
        let d0 = lerp(d00, d10, f[1]);
        let d1 = lerp(d01, d11, f[1]);
        (lerp(d0, d1, f[2]), out)
    }

    /// Analytic gradient of the trilinear interpolant at `p`
    /// (meters of distance per meter of position, piecewise linear per axis).
    /// Points from obstacles toward free space.
    pub fn gradient_at(&self, p: &Vector3<f64>) -> (Vector3<f64>, bool) {
        let (_, g, out) = self.distance_and_gradient_at(p);
        (g, out)
    }

    /// Distance and gradient in one cell lookup.
    pub fn distance_and_gradient_at(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>, bool) {
        let (u, out) = self.node_coords(p);
        let (b, f) = self.cell(&u);
        let c = |di: usize, dj: usize, dk: usize| self.corner(b[0] + di, b[1] + dj, b[2] + dk);
        let (fx, fy, fz) = (f[0], f[1], f[2]);
        let (gx0, gy0, gz0) = (1.0 - fx, 1.0 - fy, 1.0 - fz);

        let value = c(0, 0, 0) * gx0 * gy0 * gz0
            + c(1, 0, 0) * fx * gy0 * gz0
            + c(0, 1, 0) * gx0 * fy * gz0
            + c(1, 1, 0) * fx * fy * gz0
            + c(0, 0, 1) * gx0 * gy0 * fz
            + c(1, 0, 1) * fx * gy0 * fz
            + c(0, 1, 1) * gx0 * fy * fz
            + c(1, 1, 1) * fx * fy * fz;

        let dx = (c(1, 0, 0) - c(0, 0, 0)) * gy0 * gz0
            + (c(1, 1, 0) - c(0, 1, 0)) * fy * gz0
            + (c(1, 0, 1) - c(0, 0, 1)) * gy0 * fz
            + (c(1, 1, 1) - c(0, 1, 1)) * fy * fz;
        let dy = (c(0, 1, 0) - c(0, 0, 0)) * gx0 * gz0
            + (c(1, 1, 0) - c(1, 0, 0)) * fx * gz0
            + (c(0, 1, 1) - c(0, 0, 1)) * gx0 * fz
            + (c(1, 1, 1) - c(1, 0, 1)) * fx * fz;
        let dz = (c(0, 0, 1) - c(0, 0, 0)) * gx0 * gy0
            + (c(1, 0, 1) - c(1, 0, 0)) * fx * gy0
            + (c(0, 1, 1) - c(0, 1, 0)) * gx0 * fy
            + (c(1, 1, 1) - c(1, 1, 0)) * fx * fy;

        (value, Vector3::new(dx, dy, dz) / self.resolution, out)
    }

    /// Debug dump: one ASCII header line
    /// `edf nx ny nz res ox oy oz`, then the lattice as little-endian 32-bit
    /// floats in x-fastest order.
    pub fn write_debug_dump(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(
            file,
            "edf {} {} {} {} {} {} {}",
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.resolution,
            self.origin.x,
            self.origin.y,
            self.origin.z
        )?;
        let mut buf = Vec::with_capacity(self.distances.len() * 4);
        for &d in &self.distances {
            buf.extend_from_slice(&(d as f32).to_le_bytes());
        }
        file.write_all(&buf)?;
        Ok(())
    }
}

/// Exact squared Euclidean distance transform in voxel units, computed by
/// three sequential 1-D lower-envelope passes. `occupied` voxels map to 0;
/// a fully free lattice maps to `+inf`.
pub(crate) fn squared_voxel_distances(occupied: &[bool], dims: [usize; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut field: Vec<f64> = occupied
        .iter()
        .map(|&o| if o { 0.0 } else { f64::INFINITY })
        .collect();

    let max_n = nx.max(ny).max(nz);
    let mut f = vec![0.0f64; max_n];
    let mut d = vec![0.0f64; max_n];
    let mut v = vec![0usize; max_n];
    let mut z = vec![0.0f64; max_n + 1];

    // x pass
    for iz in 0..nz {
        for iy in 0..ny {
            let row = (iz * ny + iy) * nx;
            f[..nx].copy_from_slice(&field[row..row + nx]);
            envelope_1d(&f[..nx], &mut d[..nx], &mut v, &mut z);
            field[row..row + nx].copy_from_slice(&d[..nx]);
        }
    }
    // y pass
    for iz in 0..nz {
        for ix in 0..nx {
            for iy in 0..ny {
                f[iy] = field[(iz * ny + iy) * nx + ix];
            }
            envelope_1d(&f[..ny], &mut d[..ny], &mut v, &mut z);
            for iy in 0..ny {
                field[(iz * ny + iy) * nx + ix] = d[iy];
            }
        }
    }
    // z pass
    for iy in 0..ny {
        for ix in 0..nx {
            for iz in 0..nz {
                f[iz] = field[(iz * ny + iy) * nx + ix];
            }
            envelope_1d(&f[..nz], &mut d[..nz], &mut v, &mut z);
            for iz in 0..nz {
                field[(iz * ny + iy) * nx + ix] = d[iz];
            }
        }
    }
    field
}

/// 1-D squared-distance transform: `d[q] = min_p ((q-p)^2 + f[p])` via the
/// lower envelope of parabolas.
fn envelope_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = if f[p].is_infinite() {
                // A parabola at infinite height is dominated everywhere.
                f64::NEG_INFINITY
            } else {
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
            };
            if s <= z[k] {
                if k == 0 {
                    // Replace the (dominated) root parabola.
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        d[q] = if f[p].is_infinite() {
            f64::INFINITY
        } else {
            let dq = q as f64 - p as f64;
            dq * dq + f[p]
        };
    }
}
