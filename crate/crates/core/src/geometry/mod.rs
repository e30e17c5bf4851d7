//! Scene point clouds, voxel downsampling, 64³ occupancy masks and mask IoU.

mod scene_io;

pub use scene_io::{read_actions, read_scene, write_actions, write_scene, SceneRecord, RegionRecord, SCENE_MAGIC, SCENE_VERSION};

use std::collections::HashMap;

use thiserror::Error;

/// Cells per axis of every occupancy mask.
pub const GRID_EXTENT: usize = 64;
const GRID_CELLS: usize = GRID_EXTENT * GRID_EXTENT * GRID_EXTENT;
const WORDS: usize = GRID_CELLS / 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("voxel size must be positive, got {0}")]
    InvalidVoxelSize(f64),
    #[error("point {index} at {point:?} lies outside the grid")]
    OutOfBounds { index: usize, point: [f64; 3] },
    #[error("masks live on different grids")]
    IncompatibleGrid,
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("scene file: {0}")]
    Format(String),
}

/// Colored point set with per-point features `(r, g, b, nx, ny, nz)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenePointCloud {
    pub points: Vec<[f64; 3]>,
    pub features: Vec<[f64; 6]>,
}

impl ScenePointCloud {
    pub fn new(points: Vec<[f64; 3]>, features: Vec<[f64; 6]>) -> Result<Self, GeometryError> {
        let cloud = Self { points, features };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.points.len() != self.features.len() {
            return Err(GeometryError::InvalidScene(format!(
                "{} points but {} feature rows",
                self.points.len(),
                self.features.len()
            )));
        }
        for (i, (p, f)) in self.points.iter().zip(&self.features).enumerate() {
            if p.iter().chain(f.iter()).any(|v| !v.is_finite()) {
                return Err(GeometryError::InvalidScene(format!("point {i} is not finite")));
            }
            let n = norm3([f[3], f[4], f[5]]);
            if (n - 1.0).abs() > 1e-6 {
                return Err(GeometryError::InvalidScene(format!(
                    "point {i} normal has norm {n}"
                )));
            }
        }
        Ok(())
    }

    /// Axis-aligned bounding box `(min, max)`; `None` for an empty cloud.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(mut lo, mut hi), p| {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
            (lo, hi)
        }))
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Placement of a 64³ grid in scene coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGrid {
    pub origin: [f64; 3],
    pub voxel_size: f64,
}

impl VoxelGrid {
    pub fn new(origin: [f64; 3], voxel_size: f64) -> Result<Self, GeometryError> {
        if !voxel_size.is_finite() || voxel_size <= 0.0 {
            return Err(GeometryError::InvalidVoxelSize(voxel_size));
        }
        Ok(Self { origin, voxel_size })
    }

    /// Grid anchored at the cloud's bounding-box minimum whose cube side is
    /// the largest bounding-box extent.
    pub fn fit(cloud: &ScenePointCloud) -> Result<Self, GeometryError> {
        let (lo, hi) = cloud.bounds().ok_or(GeometryError::EmptyInput("point cloud"))?;
        let side = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        let side = if side > 0.0 { side } else { 1.0 };
        Self::new(lo, side / GRID_EXTENT as f64)
    }

    /// Cell coordinates of `p`. Points on the far face of the grid fall into
    /// the last cell.
    pub fn cell_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut cell = [0usize; 3];
        for k in 0..3 {
            let t = (p[k] - self.origin[k]) / self.voxel_size;
            if t.is_nan() || t < 0.0 || t > GRID_EXTENT as f64 {
                return None;
            }
            cell[k] = (t.floor() as usize).min(GRID_EXTENT - 1);
        }
        Some(cell)
    }

    pub fn cell_center(&self, cell: [usize; 3]) -> [f64; 3] {
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = self.origin[k] + (cell[k] as f64 + 0.5) * self.voxel_size;
        }
        c
    }
}

fn linear(cell: [usize; 3]) -> usize {
    (cell[0] * GRID_EXTENT + cell[1]) * GRID_EXTENT + cell[2]
}

fn unlinear(idx: usize) -> [usize; 3] {
    [
        idx / (GRID_EXTENT * GRID_EXTENT),
        (idx / GRID_EXTENT) % GRID_EXTENT,
        idx % GRID_EXTENT,
    ]
}

/// Binary occupancy over a 64³ grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMask {
    grid: VoxelGrid,
    bits: Vec<u64>,
}

impl VoxelMask {
    pub fn empty(grid: VoxelGrid) -> Self {
        Self {
            grid,
            bits: vec![0; WORDS],
        }
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn set(&mut self, cell: [usize; 3]) {
        let i = linear(cell);
        self.bits[i / 64] |= 1 << (i % 64);
    }

    pub fn contains(&self, cell: [usize; 3]) -> bool {
        let i = linear(cell);
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&w| w == 0)
    }

    pub fn occupied(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        self.bits.iter().enumerate().flat_map(|(w, &word)| {
            (0..64)
                .filter(move |b| word >> b & 1 == 1)
                .map(move |b| unlinear(w * 64 + b))
        })
    }

    /// Axis-aligned box `(min, max)` in scene coordinates spanned by the
    /// occupied cells.
    pub fn aabb(&self) -> Option<([f64; 3], [f64; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for c in self.occupied() {
            any = true;
            for k in 0..3 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        any.then(|| {
            let g = &self.grid;
            let min = std::array::from_fn(|k| g.origin[k] + lo[k] as f64 * g.voxel_size);
            let max = std::array::from_fn(|k| g.origin[k] + (hi[k] + 1) as f64 * g.voxel_size);
            (min, max)
        })
    }

    pub fn words(&self) -> &[u64] {
        &self.bits
    }
}

/// Candidate affordance region: a subset of the scene's points, its mask and
/// the index of its action descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRegion {
    pub mask: VoxelMask,
    pub region_points: Vec<usize>,
    pub action_descriptor_id: usize,
}

impl CandidateRegion {
    pub fn new(
        cloud: &ScenePointCloud,
        grid: VoxelGrid,
        region_points: Vec<usize>,
        action_descriptor_id: usize,
    ) -> Result<Self, GeometryError> {
        if region_points.is_empty() {
            return Err(GeometryError::EmptyInput("candidate region"));
        }
        let mask = rasterize(cloud, &region_points, grid)?;
        Ok(Self {
            mask,
            region_points,
            action_descriptor_id,
        })
    }

    pub fn validate(&self, cloud: &ScenePointCloud) -> Result<(), GeometryError> {
        if self.region_points.is_empty() {
            return Err(GeometryError::EmptyInput("candidate region"));
        }
        for &i in &self.region_points {
            let p = *cloud
                .points
                .get(i)
                .ok_or_else(|| GeometryError::InvalidScene(format!("point index {i} out of range")))?;
            let cell = self
                .mask
                .grid()
                .cell_of(p)
                .ok_or(GeometryError::OutOfBounds { index: i, point: p })?;
            if !self.mask.contains(cell) {
                return Err(GeometryError::InvalidScene(format!(
                    "point {i} falls outside its region mask"
                )));
            }
        }
        Ok(())
    }
}

/// Occupancy mask of the points `indices` of `cloud`.
pub fn rasterize(
    cloud: &ScenePointCloud,
    indices: &[usize],
    grid: VoxelGrid,
) -> Result<VoxelMask, GeometryError> {
    let mut mask = VoxelMask::empty(grid);
    for &i in indices {
        let p = *cloud
            .points
            .get(i)
            .ok_or_else(|| GeometryError::InvalidScene(format!("point index {i} out of range")))?;
        let cell = grid
            .cell_of(p)
            .ok_or(GeometryError::OutOfBounds { index: i, point: p })?;
        mask.set(cell);
    }
    Ok(mask)
}

/// Intersection over union of two masks on the same grid. Two empty masks
/// have IoU 1.
pub fn voxel_iou(a: &VoxelMask, b: &VoxelMask) -> Result<f64, GeometryError> {
    if a.grid != b.grid {
        return Err(GeometryError::IncompatibleGrid);
    }
    let (mut inter, mut union) = (0u32, 0u32);
    for (x, y) in a.bits.iter().zip(&b.bits) {
        inter += (x & y).count_ones();
        union += (x | y).count_ones();
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Default)]
struct VoxelAcc {
    count: usize,
    first: usize,
    point: [f64; 3],
    color: [f64; 3],
    normal: [f64; 3],
}

/// One representative per occupied `voxel_size` cell: the members' centroid,
/// mean color and renormalized mean normal. When more than `target_count`
/// cells are occupied, the most populated cells are kept (ties broken by
/// cell index). Output is ordered by cell index.
pub fn voxel_downsample(
    cloud: &ScenePointCloud,
    voxel_size: f64,
    target_count: usize,
) -> Result<ScenePointCloud, GeometryError> {
    if cloud.is_empty() {
        return Err(GeometryError::EmptyInput("point cloud"));
    }
    if !voxel_size.is_finite() || voxel_size <= 0.0 {
        return Err(GeometryError::InvalidVoxelSize(voxel_size));
    }
    if target_count == 0 {
        return Err(GeometryError::EmptyInput("target count"));
    }
    let mut cells: HashMap<[i64; 3], VoxelAcc> = HashMap::new();
    for (i, (p, f)) in cloud.points.iter().zip(&cloud.features).enumerate() {
        let key = [
            (p[0] / voxel_size).floor() as i64,
            (p[1] / voxel_size).floor() as i64,
            (p[2] / voxel_size).floor() as i64,
        ];
        let acc = cells.entry(key).or_insert_with(|| VoxelAcc {
            first: i,
            ..Default::default()
        });
        acc.count += 1;
        for k in 0..3 {
            acc.point[k] += p[k];
            acc.color[k] += f[k];
            acc.normal[k] += f[k + 3];
        }
    }
    let mut kept: Vec<([i64; 3], VoxelAcc)> = cells.into_iter().collect();
    if kept.len() > target_count {
        kept.sort_unstable_by(|a, b| b.1.count.cmp(&a.1.count).then(a.0.cmp(&b.0)));
        kept.truncate(target_count);
    }
    kept.sort_unstable_by_key(|a| a.0);

    let mut points = Vec::with_capacity(kept.len());
    let mut features = Vec::with_capacity(kept.len());
    for (_, acc) in kept {
        if acc.count == 1 {
            points.push(cloud.points[acc.first]);
            features.push(cloud.features[acc.first]);
            continue;
        }
        let inv = 1.0 / acc.count as f64;
        points.push(acc.point.map(|v| v * inv));
        let n = norm3(acc.normal);
        let normal = if n > 1e-12 {
            acc.normal.map(|v| v / n)
        } else {
            let f = cloud.features[acc.first];
            [f[3], f[4], f[5]]
        };
        let c = acc.color.map(|v| v * inv);
        features.push([c[0], c[1], c[2], normal[0], normal[1], normal[2]]);
    }
    Ok(ScenePointCloud { points, features })
}
