//! Axis-aligned 3-D occupancy grid with configuration-space inflation and
//! seeded random world generation for benchmarks.
//!
//! Grids are immutable once built and inflated; the replanner mutates its
//! private known-world copy through the incremental reveal/stamp methods and
//! shares the result read-only.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Voxel index, `[ix, iy, iz]`.
pub type GridIndex = [usize; 3];

/// Dense axis-aligned occupancy grid. Storage is x-fastest.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    origin: Vector3<f64>,
    resolution: f64,
    inv_resolution: f64,
    dims: [usize; 3],
    occupancy: Vec<bool>,
    inflation_radius: f64,
}

impl VoxelGrid {
    pub fn new(
        origin: Vector3<f64>,
        resolution: f64,
        dims: [usize; 3],
        inflation_radius: f64,
    ) -> Result<Self> {
        if !(resolution > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "resolution must be positive, got {resolution}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidGrid(format!(
                "all dims must be >= 1, got {dims:?}"
            )));
        }
        if inflation_radius < 0.0 {
            return Err(Error::InvalidGrid(format!(
                "inflation radius must be >= 0, got {inflation_radius}"
            )));
        }
        Ok(Self {
            origin,
            resolution,
            inv_resolution: 1.0 / resolution,
            dims,
            occupancy: vec![false; dims[0] * dims[1] * dims[2]],
            inflation_radius,
        })
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

    pub fn inflation_radius(&self) -> f64 {
        self.inflation_radius
    }

    /// Upper corner of the grid in world coordinates.
    pub fn max_corner(&self) -> Vector3<f64> {
        self.origin
            + Vector3::new(
                self.dims[0] as f64 * self.resolution,
                self.dims[1] as f64 * self.resolution,
                self.dims[2] as f64 * self.resolution,
            )
    }

    #[inline]
    pub fn linear(&self, idx: GridIndex) -> usize {
        (idx[2] * self.dims[1] + idx[1]) * self.dims[0] + idx[0]
    }

    /// Center of voxel `idx` in world coordinates.
    #[inline]
    pub fn index_to_world(&self, idx: GridIndex) -> Vector3<f64> {
        Vector3::new(
            self.origin.x + (idx[0] as f64 + 0.5) * self.resolution,
            self.origin.y + (idx[1] as f64 + 0.5) * self.resolution,
            self.origin.z + (idx[2] as f64 + 0.5) * self.resolution,
        )
    }

    /// Voxel containing `p`, or `None` when `p` lies outside the grid.
    /// `index = floor((p - origin)/resolution)` componentwise; never clamps.
    #[inline]
    pub fn world_to_index(&self, p: &Vector3<f64>) -> Option<GridIndex> {
        let mut idx = [0usize; 3];
        for axis in 0..3 {
            let u = ((p[axis] - self.origin[axis]) * self.inv_resolution).floor();
            if u < 0.0 || u >= self.dims[axis] as f64 {
                return None;
            }
            idx[axis] = u as usize;
        }
        Some(idx)
    }

    #[inline]
    pub fn is_occupied(&self, idx: GridIndex) -> bool {
        self.occupancy[self.linear(idx)]
    }

    /// True iff `p` is inside the grid and its voxel is free.
    /// Points outside the grid count as not free.
    #[inline]
    pub fn is_free_world(&self, p: &Vector3<f64>) -> bool {
        match self.world_to_index(p) {
            Some(idx) => !self.is_occupied(idx),
            None => false,
        }
    }

    pub fn set_occupied(&mut self, idx: GridIndex) {
        let lin = self.linear(idx);
        self.occupancy[lin] = true;
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn occupied_indices(&self) -> Vec<GridIndex> {
        let mut out = Vec::new();
        for iz in 0..self.dims[2] {
            for iy in 0..self.dims[1] {
                for ix in 0..self.dims[0] {
                    if self.is_occupied([ix, iy, iz]) {
                        out.push([ix, iy, iz]);
                    }
                }
            }
        }
        out
    }

    /// Mark every voxel occupied whose world-space AABB overlap with
    /// `[min, max]` contains the voxel center.
    pub fn fill_box(&mut self, min: &Vector3<f64>, max: &Vector3<f64>) {
        let lo = self.clamped_index_floor(min);
        let hi = self.clamped_index_ceil(max);
        for iz in lo[2]..=hi[2] {
            for iy in lo[1]..=hi[1] {
                for ix in lo[0]..=hi[0] {
                    let c = self.index_to_world([ix, iy, iz]);
                    if (0..3).all(|a| c[a] >= min[a] && c[a] <= max[a]) {
                        self.set_occupied([ix, iy, iz]);
                    }
                }
            }
        }
    }

    fn clamped_index_floor(&self, p: &Vector3<f64>) -> GridIndex {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let u = ((p[a] - self.origin[a]) / self.resolution).floor();
            idx[a] = u.max(0.0).min((self.dims[a] - 1) as f64) as usize;
        }
        idx
    }

    fn clamped_index_ceil(&self, p: &Vector3<f64>) -> GridIndex {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let u = ((p[a] - self.origin[a]) / self.resolution).ceil();
            idx[a] = u.max(0.0).min((self.dims[a] - 1) as f64) as usize;
        }
        idx
    }

    /// Configuration-space inflation: voxel `v` is occupied in the output iff
    /// some raw-occupied voxel center lies within `inflation_radius`
    /// (Euclidean, center to center) of `v`'s center.
    ///
    /// Computed by thresholding the exact squared distance transform, which
    /// is identical to stamping a Euclidean ball around every occupied voxel.
    pub fn inflate(&self) -> VoxelGrid {
        let mut out = self.clone();
        if self.inflation_radius == 0.0 {
            return out;
        }
        let d2 = crate::distance_field::squared_voxel_distances(&self.occupancy, self.dims);
        let r2 = self.inflation_radius * self.inflation_radius;
        let res2 = self.resolution * self.resolution;
        for (o, &d2v) in out.occupancy.iter_mut().zip(d2.iter()) {
            if d2v * res2 <= r2 {
                *o = true;
            }
        }
        out
    }

    /// Conservative resolution coarsening: a coarse voxel is occupied iff any
    /// fine voxel it covers is occupied. Coarse dims round up, so a partial
    /// trailing block becomes a full coarse voxel. Used for the
    /// resolution-comparison rows, where the same world is planned on
    /// coarser grids.
    pub fn coarsen(&self, factor: usize) -> Result<VoxelGrid> {
        if factor == 0 {
            return Err(Error::InvalidGrid("coarsening factor must be >= 1".into()));
        }
        let dims = [
            self.dims[0].div_ceil(factor),
            self.dims[1].div_ceil(factor),
            self.dims[2].div_ceil(factor),
        ];
        let mut out = VoxelGrid::new(
            self.origin,
            self.resolution * factor as f64,
            dims,
            self.inflation_radius,
        )?;
        for iz in 0..self.dims[2] {
            for iy in 0..self.dims[1] {
                for ix in 0..self.dims[0] {
                    if self.is_occupied([ix, iy, iz]) {
                        out.set_occupied([ix / factor, iy / factor, iz / factor]);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Incremental inflation: stamp the Euclidean ball of `radius` around each
    /// newly occupied raw voxel in `sites`, returning the indices that flipped
    /// from free to occupied. Equivalent to re-running [`inflate`] on the raw
    /// grid extended by `sites`.
    ///
    /// [`inflate`]: VoxelGrid::inflate
    pub fn stamp_inflated_sites(&mut self, sites: &[GridIndex], radius: f64) -> Vec<GridIndex> {
        let reach = (radius / self.resolution).floor() as i64;
        let r2 = radius * radius;
        let res2 = self.resolution * self.resolution;
        let mut flipped = Vec::new();
        for &site in sites {
            for dz in -reach..=reach {
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        let d2 = (dx * dx + dy * dy + dz * dz) as f64;
                        if d2 * res2 > r2 {
                            continue;
                        }
                        let ix = site[0] as i64 + dx;
                        let iy = site[1] as i64 + dy;
                        let iz = site[2] as i64 + dz;
                        if ix < 0
                            || iy < 0
                            || iz < 0
                            || ix >= self.dims[0] as i64
                            || iy >= self.dims[1] as i64
                            || iz >= self.dims[2] as i64
                        {
                            continue;
                        }
                        let idx = [ix as usize, iy as usize, iz as usize];
                        let lin = self.linear(idx);
                        if !self.occupancy[lin] {
                            self.occupancy[lin] = true;
                            flipped.push(idx);
                        }
                    }
                }
            }
        }
        flipped
    }

    /// Save as an ASCII point list: one header line
    /// `# origin ox oy oz res r dims nx ny nz`, then one occupied-voxel center
    /// per line as `x y z` in meters. Round-trips exactly with [`load`].
    ///
    /// [`load`]: VoxelGrid::load
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        writeln!(
            text,
            "# origin {} {} {} res {} {} dims {} {} {}",
            self.origin.x,
            self.origin.y,
            self.origin.z,
            self.resolution,
            self.inflation_radius,
            self.dims[0],
            self.dims[1],
            self.dims[2]
        )
        .expect("string write");
        for idx in self.occupied_indices() {
            let c = self.index_to_world(idx);
            writeln!(text, "{} {} {}", c.x, c.y, c.z).expect("string write");
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<VoxelGrid> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::MapFormat("empty map file".into()))?;
        let tokens: Vec<&str> = header.split_whitespace().collect();
        if tokens.len() != 12
            || tokens[0] != "#"
            || tokens[1] != "origin"
            || tokens[5] != "res"
            || tokens[8] != "dims"
        {
            return Err(Error::MapFormat(format!("bad header: {header:?}")));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::MapFormat(format!("bad number {s:?}: {e}")))
        };
        let u = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|e| Error::MapFormat(format!("bad integer {s:?}: {e}")))
        };
        let origin = Vector3::new(f(tokens[2])?, f(tokens[3])?, f(tokens[4])?);
        let resolution = f(tokens[6])?;
        let inflation = f(tokens[7])?;
        let dims = [u(tokens[9])?, u(tokens[10])?, u(tokens[11])?];
        let mut grid = VoxelGrid::new(origin, resolution, dims, inflation)?;
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let nums: Vec<&str> = line.split_whitespace().collect();
            if nums.len() != 3 {
                return Err(Error::MapFormat(format!(
                    "line {}: expected 3 numbers",
                    lineno + 2
                )));
            }
            let p = Vector3::new(f(nums[0])?, f(nums[1])?, f(nums[2])?);
            let idx = grid.world_to_index(&p).ok_or_else(|| {
                Error::MapFormat(format!("line {}: point outside grid", lineno + 2))
            })?;
            grid.set_occupied(idx);
        }
        Ok(grid)
    }
}

/// Obstacle primitive used by the world generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObstacleKind {
    /// Axis-aligned box pillars of random footprint spanning full height.
    BoxPillar,
    /// Walls across the x axis with a rectangular hole punched through.
    WallWithHole,
}

/// Axis-aligned box in world coordinates, used for keep-free regions.
#[derive(Debug, Clone, Copy)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn around(center: &Vector3<f64>, margin: f64) -> Self {
        let m = Vector3::repeat(margin);
        Aabb {
            min: center - m,
            max: center + m,
        }
    }

    fn overlaps(&self, min: &Vector3<f64>, max: &Vector3<f64>) -> bool {
        (0..3).all(|a| self.min[a] <= max[a] && min[a] <= self.max[a])
    }
}

/// Seeded specification of a random benchmark world. Identical specs generate
/// bit-identical occupancy.
#[derive(Debug, Clone)]
pub struct WorldSpec {
    pub extent: Vector3<f64>,
    pub obstacle_count: usize,
    pub obstacle_kind: ObstacleKind,
    pub seed: u64,
    /// Regions kept free by rejection sampling (start/goal margin boxes).
    pub clear_regions: Vec<Aabb>,
}

impl WorldSpec {
    pub fn pillars(extent: Vector3<f64>, obstacle_count: usize, seed: u64) -> Self {
        WorldSpec {
            extent,
            obstacle_count,
            obstacle_kind: ObstacleKind::BoxPillar,
            seed,
            clear_regions: Vec::new(),
        }
    }
}

/// Attempts per obstacle before generation gives up.
const MAX_REJECTIONS: usize = 200;

/// Generate a world from a seeded spec. Obstacles are placed by a ChaCha8
/// stream, so equal specs yield equal grids on every platform.
pub fn generate_world(
    spec: &WorldSpec,
    resolution: f64,
    inflation_radius: f64,
) -> Result<VoxelGrid> {
    let dims = [
        (spec.extent.x / resolution).round().max(1.0) as usize,
        (spec.extent.y / resolution).round().max(1.0) as usize,
        (spec.extent.z / resolution).round().max(1.0) as usize,
    ];
    let mut grid = VoxelGrid::new(Vector3::zeros(), resolution, dims, inflation_radius)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    for i in 0..spec.obstacle_count {
        let mut placed = false;
        for _ in 0..MAX_REJECTIONS {
            let (min, max) = match spec.obstacle_kind {
                ObstacleKind::BoxPillar => {
                    let w = rng.random_range(0.4..=1.2);
                    let d = rng.random_range(0.4..=1.2);
                    let cx = rng.random_range(0.0..spec.extent.x);
                    let cy = rng.random_range(0.0..spec.extent.y);
                    (
                        Vector3::new(cx - w / 2.0, cy - d / 2.0, 0.0),
                        Vector3::new(cx + w / 2.0, cy + d / 2.0, spec.extent.z),
                    )
                }
                ObstacleKind::WallWithHole => {
                    let t = rng.random_range(0.2..=0.4);
                    let cx = rng.random_range(0.2 * spec.extent.x..0.8 * spec.extent.x);
                    (
                        Vector3::new(cx - t / 2.0, 0.0, 0.0),
                        Vector3::new(cx + t / 2.0, spec.extent.y, spec.extent.z),
                    )
                }
            };
            if spec.clear_regions.iter().any(|r| r.overlaps(&min, &max)) {
                continue;
            }
            grid.fill_box(&min, &max);
            if spec.obstacle_kind == ObstacleKind::WallWithHole {
                // Punch a hole the robot can fit through.
                let hw = rng.random_range(0.8..=1.5);
                let hh = rng.random_range(0.8..=1.5_f64).min(spec.extent.z - 0.4);
                let hy = rng.random_range(0.5..(spec.extent.y - hw - 0.5).max(0.6));
                let hz = rng.random_range(0.2..(spec.extent.z - hh - 0.2).max(0.3));
                carve_box(
                    &mut grid,
                    &Vector3::new(min.x - resolution, hy, hz),
                    &Vector3::new(max.x + resolution, hy + hw, hz + hh),
                );
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::WorldGeneration(format!(
                "could not place obstacle {i} clear of start/goal regions after {MAX_REJECTIONS} tries"
            )));
        }
    }
    Ok(grid)
}

fn carve_box(grid: &mut VoxelGrid, min: &Vector3<f64>, max: &Vector3<f64>) {
    let lo = grid.clamped_index_floor(min);
    let hi = grid.clamped_index_ceil(max);
    for iz in lo[2]..=hi[2] {
        for iy in lo[1]..=hi[1] {
            for ix in lo[0]..=hi[0] {
                let c = grid.index_to_world([ix, iy, iz]);
                if (0..3).all(|a| c[a] >= min[a] && c[a] <= max[a]) {
                    let lin = grid.linear([ix, iy, iz]);
                    grid.occupancy[lin] = false;
                }
            }
        }
    }
}
