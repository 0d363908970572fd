//! Camera poses, pinhole projection, and the voxel grid shared by all views.
//!
//! Conventions: right-handed world, `+y` up. A camera at azimuth 0 and
//! elevation 0 sits on the `+z` axis looking at the origin. Camera frames are
//! `x` right, `y` down, `z` forward, so `depth = z_c` and pixel rows grow
//! downwards. Integer pixel coordinates address pixel centers.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// World-to-camera extrinsics plus the spherical angles they were built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    /// Rows are the camera axes (right, down, forward) in world coordinates.
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl CameraPose {
    pub fn center(&self) -> Vec3 {
        let t = self.translation;
        let c = mat_t_vec(&self.rotation, t);
        [-c[0], -c[1], -c[2]]
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation[2]
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    pub fn camera_to_world(&self, p: Vec3) -> Vec3 {
        let q = [p[0] - self.translation[0], p[1] - self.translation[1], p[2] - self.translation[2]];
        mat_t_vec(&self.rotation, q)
    }

    /// Unit world direction of a camera-frame direction.
    pub fn camera_to_world_dir(&self, d: Vec3) -> Vec3 {
        normalize(mat_t_vec(&self.rotation, d))
    }
}

/// Places a camera on the sphere of `radius`, looking at the origin with `+y` up.
pub fn pose_from_angles(azimuth: f64, elevation: f64, radius: f64) -> Result<CameraPose> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::invalid(format!("camera radius must be > 0, got {radius}")));
    }
    if !azimuth.is_finite() || !(-90.0..=90.0).contains(&elevation) {
        return Err(Error::invalid(format!(
            "pose angles out of range: azimuth {azimuth}, elevation {elevation}"
        )));
    }
    let azimuth = wrap_degrees(azimuth);
    let (az, el) = (azimuth.to_radians(), elevation.to_radians());
    let center = [radius * el.cos() * az.sin(), radius * el.sin(), radius * el.cos() * az.cos()];
    let forward = normalize([-center[0], -center[1], -center[2]]);
    // At the poles the world up is parallel to the view axis; fall back to the
    // azimuth's horizontal heading so the frame stays continuous.
    let up = if elevation.abs() > 89.999_999 {
        let s = elevation.signum();
        [-s * az.sin(), 0.0, -s * az.cos()]
    } else {
        [0.0, 1.0, 0.0]
    };
    let right = normalize(cross(forward, up));
    let true_up = cross(right, forward);
    let down = [-true_up[0], -true_up[1], -true_up[2]];
    let rotation = [right, down, forward];
    let rc = mat_vec(&rotation, center);
    Ok(CameraPose {
        azimuth,
        elevation,
        radius,
        rotation,
        translation: [-rc[0], -rc[1], -rc[2]],
    })
}

/// Maps any finite angle into `[-180, 180)`, keeping `180` itself as `180`.
fn wrap_degrees(a: f64) -> f64 {
    if (-180.0..=180.0).contains(&a) {
        return a;
    }
    (a + 180.0).rem_euclid(360.0) - 180.0
}

/// `n` azimuths uniformly spanning `[-180, 180)`.
pub fn uniform_azimuths(n: usize) -> Vec<f64> {
    (0..n).map(|i| -180.0 + 360.0 * i as f64 / n as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(focal: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(focal > 0.0) {
            return Err(Error::invalid(format!("focal must be > 0, got {focal}")));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::invalid(format!(
                "principal point ({cx}, {cy}) outside a {width}x{height} image"
            )));
        }
        Ok(Self { focal, cx, cy, width, height })
    }

    /// Principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(focal, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)
    }

    /// The same camera sampled at a different pixel resolution.
    pub fn rescaled(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            focal: self.focal * sx,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    /// Camera-frame direction through pixel `(u, v)`, scaled so that `z = 1`.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        [(u - self.cx) / self.focal, (v - self.cy) / self.focal, 1.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visibility {
    InFront,
    Behind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub visibility: Visibility,
}

impl Projection {
    pub fn in_frustum(&self, k: &Intrinsics) -> bool {
        self.visibility == Visibility::InFront && k.contains(self.u, self.v)
    }
}

pub fn project(point: Vec3, pose: &CameraPose, k: &Intrinsics) -> Projection {
    let pc = pose.world_to_camera(point);
    let depth = pc[2];
    if depth <= 0.0 {
        return Projection { u: f64::NAN, v: f64::NAN, depth, visibility: Visibility::Behind };
    }
    Projection {
        u: k.focal * pc[0] / depth + k.cx,
        v: k.focal * pc[1] / depth + k.cy,
        depth,
        visibility: Visibility::InFront,
    }
}

/// Regular `L x L x L` lattice spanning `[-extent, extent]` on each axis.
///
/// Linear index of vertex `(i, j, k)` is `(i * L + j) * L + k`, with `i`, `j`,
/// `k` stepping along world `x`, `y`, `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub size: usize,
    pub extent: f64,
}

impl VoxelGrid {
    pub fn spacing(&self) -> f64 {
        2.0 * self.extent / (self.size - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.size * self.size * self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        -self.extent + 2.0 * self.extent * i as f64 / (self.size - 1) as f64
    }

    pub fn vertex(&self, i: usize, j: usize, k: usize) -> Vec3 {
        [self.coordinate(i), self.coordinate(j), self.coordinate(k)]
    }

    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.size + j) * self.size + k
    }

    pub fn vertices(&self) -> Vec<Vec3> {
        let n = self.size;
        let mut out = Vec::with_capacity(self.len());
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    out.push(self.vertex(i, j, k));
                }
            }
        }
        out
    }

    /// Continuous lattice coordinate of a world position along one axis.
    pub fn to_lattice(&self, x: f64) -> f64 {
        (x + self.extent) / (2.0 * self.extent) * (self.size - 1) as f64
    }
}

pub fn build_voxel_grid(size: usize, extent: f64) -> Result<VoxelGrid> {
    if size < 2 {
        return Err(Error::invalid(format!("voxel grid needs at least 2 vertices per axis, got {size}")));
    }
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(Error::invalid(format!("grid extent must be > 0, got {extent}")));
    }
    Ok(VoxelGrid { size, extent })
}

/// Fixed gather plan that bilinearly samples an `H x W` feature map at the
/// projection of every grid vertex.
///
/// Corner indices address a flattened `H * W` map; out-of-frustum vertices
/// point at `sentinel` (an appended all-zero row) with zero weights.
#[derive(Debug, Clone)]
pub struct BilinearPlan {
    pub indices: Vec<u32>,
    pub weights: Vec<f64>,
    pub valid: Vec<bool>,
    pub sentinel: u32,
}

impl BilinearPlan {
    pub fn new(points: &[Vec3], pose: &CameraPose, k: &Intrinsics) -> Self {
        let sentinel = (k.width * k.height) as u32;
        let mut indices = Vec::with_capacity(points.len() * 4);
        let mut weights = Vec::with_capacity(points.len() * 4);
        let mut valid = Vec::with_capacity(points.len());
        for &p in points {
            let proj = project(p, pose, k);
            if !proj.in_frustum(k) {
                indices.extend_from_slice(&[sentinel; 4]);
                weights.extend_from_slice(&[0.0; 4]);
                valid.push(false);
                continue;
            }
            let (idx, w) = bilinear_corners(proj.u, proj.v, k.width, k.height);
            indices.extend_from_slice(&idx);
            weights.extend_from_slice(&w);
            valid.push(true);
        }
        Self { indices, weights, valid, sentinel }
    }
}

/// Corner indices (row-major into `width * height`) and weights for a point
/// already known to be inside `[0, W-1] x [0, H-1]`.
pub(crate) fn bilinear_corners(u: f64, v: f64, width: usize, height: usize) -> ([u32; 4], [f64; 4]) {
    let j0 = (u.floor() as usize).min(width - 1);
    let i0 = (v.floor() as usize).min(height - 1);
    let j1 = (j0 + 1).min(width - 1);
    let i1 = (i0 + 1).min(height - 1);
    let fx = u - j0 as f64;
    let fy = v - i0 as f64;
    let at = |i: usize, j: usize| (i * width + j) as u32;
    (
        [at(i0, j0), at(i0, j1), at(i1, j0), at(i1, j1)],
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    )
}


/// Trilinear gather plan into the `L^3` vertex lattice of a grid, row order
/// `(i * L + j) * L + k`. Points outside the grid point at `sentinel = L^3`.
#[derive(Debug, Clone)]
pub struct TrilinearPlan {
    pub indices: Vec<u32>,
    pub weights: Vec<f64>,
    pub valid: Vec<bool>,
    pub sentinel: u32,
}

impl TrilinearPlan {
    pub fn new(points: &[Vec3], grid: &VoxelGrid) -> Self {
        let l = grid.size;
        let sentinel = grid.len() as u32;
        let top = (l - 1) as f64;
        let mut indices = Vec::with_capacity(points.len() * 8);
        let mut weights = Vec::with_capacity(points.len() * 8);
        let mut valid = Vec::with_capacity(points.len());
        for p in points {
            let g = p.map(|x| grid.to_lattice(x));
            if g.iter().any(|&x| !(0.0..=top).contains(&x)) {
                indices.extend_from_slice(&[sentinel; 8]);
                weights.extend_from_slice(&[0.0; 8]);
                valid.push(false);
                continue;
            }
            let lo = g.map(|x| (x.floor() as usize).min(l - 1));
            let hi = lo.map(|x| (x + 1).min(l - 1));
            let f = [g[0] - lo[0] as f64, g[1] - lo[1] as f64, g[2] - lo[2] as f64];
            for c in 0..8 {
                let pick = |axis: usize| if c >> (2 - axis) & 1 == 1 { (hi[axis], f[axis]) } else { (lo[axis], 1.0 - f[axis]) };
                let (a, wa) = pick(0);
                let (b, wb) = pick(1);
                let (d, wd) = pick(2);
                indices.push(grid.linear_index(a, b, d) as u32);
                weights.push(wa * wb * wd);
            }
            valid.push(true);
        }
        Self { indices, weights, valid, sentinel }
    }
}

/// Tensor form of a bilinear or trilinear plan.
#[derive(Debug, Clone)]
pub struct GatherPlan {
    indices: Tensor,
    weights: Tensor,
    valid: Tensor,
    points: usize,
    corners: usize,
}

impl GatherPlan {
    fn build(indices: &[u32], weights: &[f64], valid: &[bool], dtype: DType) -> Result<Self> {
        let points = valid.len();
        let corners = if points == 0 { 1 } else { indices.len() / points };
        let dev = Device::Cpu;
        Ok(Self {
            indices: Tensor::from_slice(indices, indices.len(), &dev)?,
            weights: Tensor::from_slice(weights, (points, corners, 1), &dev)?.to_dtype(dtype)?,
            valid: Tensor::from_vec(valid.iter().map(|&v| v as u8 as f64).collect::<Vec<_>>(), (points, 1), &dev)?
                .to_dtype(dtype)?,
            points,
            corners,
        })
    }

    pub fn bilinear(plan: &BilinearPlan, dtype: DType) -> Result<Self> {
        Self::build(&plan.indices, &plan.weights, &plan.valid, dtype)
    }

    pub fn trilinear(plan: &TrilinearPlan, dtype: DType) -> Result<Self> {
        Self::build(&plan.indices, &plan.weights, &plan.valid, dtype)
    }

    /// `(points, 1)` mask, one where the point landed inside the source.
    pub fn validity(&self) -> &Tensor {
        &self.valid
    }

    /// Samples a `(rows, C)` source whose rows are addressed by the plan.
    pub fn apply(&self, source: &Tensor) -> Result<Tensor> {
        let (_, c) = source.dims2()?;
        let padded = crate::nn::with_zero_row(source)?;
        let g = padded.index_select(&self.indices, 0)?.reshape((self.points, self.corners, c))?;
        Ok(g.broadcast_mul(&self.weights)?.sum(1)?)
    }
}

/// Samples a `(C, H, W)` feature map at every grid vertex; returns the
/// `(L^3, C)` volume and its `(L^3, 1)` validity mask.
pub fn sample_view_features(
    features: &Tensor,
    pose: &CameraPose,
    k: &Intrinsics,
    grid: &VoxelGrid,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = features.dims3()?;
    if (w, h) != (k.width, k.height) {
        return Err(Error::shape((k.height, k.width), (h, w)));
    }
    let plan = GatherPlan::bilinear(&BilinearPlan::new(&grid.vertices(), pose, k), features.dtype())?;
    let flat = features.reshape((c, h * w))?.t()?.contiguous()?;
    Ok((plan.apply(&flat)?, plan.validity().clone()))
}

/// Evenly spaced depths from `near` to `far` inclusive.
pub fn depth_samples(near: f64, far: f64, count: usize) -> Result<Vec<f64>> {
    if count < 2 || !(near > 0.0 && far > near) {
        return Err(Error::invalid(format!("need count >= 2 and 0 < near < far, got {count}, {near}, {far}")));
    }
    Ok((0..count).map(|i| near + (far - near) * i as f64 / (count - 1) as f64).collect())
}

/// World points along every pixel ray of `k`, ordered `(depth, row, col)`.
/// Depth is the camera-frame `z`.
pub fn frustum_points(pose: &CameraPose, k: &Intrinsics, depths: &[f64]) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(depths.len() * k.width * k.height);
    for &d in depths {
        for v in 0..k.height {
            for u in 0..k.width {
                let r = k.ray(u as f64, v as f64);
                out.push(pose.camera_to_world([r[0] * d, r[1] * d, d]));
            }
        }
    }
    out
}
