//! Head-mesh geometry prior: estimation from the input image and
//! voxelization into a sparse occupancy set.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::camera::{VoxelGrid, Vec3};
use crate::error::{Error, Result};

/// Shape parameters of the parametric toy head.
///
/// Semi-axes of the skull ellipsoid are `scale * axes`. Feature blobs (eyes,
/// nose, mouth, ears) sit at fixed positions on the unit head and scale with it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadShape {
    pub scale: f64,
    pub axes: Vec3,
    /// Nose protrusion relative to the skull surface.
    pub nose: f64,
}

impl Default for HeadShape {
    fn default() -> Self {
        Self { scale: 1.0, axes: [0.62, 0.78, 0.70], nose: 0.12 }
    }
}

impl HeadShape {
    pub fn semi_axes(&self) -> Vec3 {
        [self.scale * self.axes[0], self.scale * self.axes[1], self.scale * self.axes[2]]
    }
}

/// Unit-sphere directions of the face features, head facing `+z`.
pub(crate) const EYE_LEFT: Vec3 = [-0.36, 0.22, 0.905];
pub(crate) const EYE_RIGHT: Vec3 = [0.36, 0.22, 0.905];
pub(crate) const NOSE_TIP: Vec3 = [0.0, -0.05, 1.0];
pub(crate) const MOUTH: Vec3 = [0.0, -0.42, 0.907];

const LAT_BANDS: usize = 14;
const LON_BANDS: usize = 28;

/// Vertices of the ellipsoid-plus-blobs head.
pub fn parametric_head(shape: &HeadShape) -> Vec<Vec3> {
    let [a, b, c] = shape.semi_axes();
    let mut verts = Vec::with_capacity(LAT_BANDS * LON_BANDS + 64);
    for i in 0..=LAT_BANDS {
        let theta = std::f64::consts::PI * i as f64 / LAT_BANDS as f64;
        let ring = if i == 0 || i == LAT_BANDS { 1 } else { LON_BANDS };
        for j in 0..ring {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / LON_BANDS as f64;
            let (st, ct) = theta.sin_cos();
            let (sp, cp) = phi.sin_cos();
            verts.push([a * st * sp, b * ct, c * st * cp]);
        }
    }
    let mut blob = |dir: Vec3, lift: f64, radius: f64| {
        let n = crate::camera::normalize(dir);
        let base = [n[0] * a * (1.0 + lift), n[1] * b * (1.0 + lift), n[2] * c * (1.0 + lift)];
        verts.push(base);
        for k in 0..6 {
            let ang = std::f64::consts::PI * k as f64 / 3.0;
            let r = radius * shape.scale;
            verts.push([base[0] + r * ang.cos(), base[1] + r * ang.sin(), base[2]]);
        }
    };
    blob(EYE_LEFT, 0.02, 0.06);
    blob(EYE_RIGHT, 0.02, 0.06);
    blob(NOSE_TIP, shape.nose, 0.04);
    blob(MOUTH, 0.03, 0.07);
    blob([-1.0, 0.05, 0.0], 0.06, 0.05);
    blob([1.0, 0.05, 0.0], 0.06, 0.05);
    verts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMesh {
    pub vertices: Vec<Vec3>,
    pub provider: String,
}

impl HeadMesh {
    pub fn new(vertices: Vec<Vec3>, provider: impl Into<String>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::invalid("mesh needs at least one vertex"));
        }
        if vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::invalid("mesh has non-finite coordinates"));
        }
        Ok(Self { vertices, provider: provider.into() })
    }

    /// `(min, max)` corners of the axis-aligned bounding box.
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.vertices.len() as f64;
        let mut c = [0.0; 3];
        for v in &self.vertices {
            for a in 0..3 {
                c[a] += v[a] / n;
            }
        }
        c
    }

    /// Registers the mesh to the grid: centroid moved to the origin, and
    /// shrunk (never enlarged) so every vertex lies within `0.9 * extent`.
    pub fn normalized_to(&self, grid: &VoxelGrid) -> HeadMesh {
        let c = self.centroid();
        let mut verts: Vec<Vec3> = self
            .vertices
            .iter()
            .map(|v| [v[0] - c[0], v[1] - c[1], v[2] - c[2]])
            .collect();
        let max_abs = verts.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
        let limit = 0.9 * grid.extent;
        if max_abs > limit {
            let s = limit / max_abs;
            for v in &mut verts {
                for x in v.iter_mut() {
                    *x *= s;
                }
            }
        }
        HeadMesh { vertices: verts, provider: self.provider.clone() }
    }
}

/// Source of the geometry prior for an input image.
pub trait MeshProvider: Send + Sync {
    fn id(&self) -> &str;
    fn estimate(&self, image: &RgbImage) -> Result<HeadMesh>;
}

/// Fits the parametric head to the input image's foreground statistics.
///
/// The silhouette is whatever differs from the border color. Its area gives
/// the head scale (through the camera's pixels-per-world-unit at the origin),
/// its second moments give the width/height aspect, and the mean foreground
/// chroma sets the nose depth.
#[derive(Debug, Clone, Copy)]
pub struct ToyParametricProvider {
    /// Focal length divided by camera distance, for the image size the provider sees.
    pub pixels_per_unit: f64,
    pub image_width: usize,
}

impl ToyParametricProvider {
    pub const ID: &'static str = "toy-parametric";

    pub fn new(focal: f64, camera_radius: f64, image_width: usize) -> Self {
        Self { pixels_per_unit: focal / camera_radius, image_width }
    }

    pub fn shape_from_image(&self, image: &RgbImage) -> HeadShape {
        let (w, h) = image.dimensions();
        let px = |x: u32, y: u32| {
            let p = image.get_pixel(x, y).0;
            [p[0] as f64, p[1] as f64, p[2] as f64]
        };
        let mut border = [0.0; 3];
        let mut nb = 0.0;
        for x in 0..w {
            for y in [0, h - 1] {
                let p = px(x, y);
                for c in 0..3 {
                    border[c] += p[c];
                }
                nb += 1.0;
            }
        }
        for c in &mut border {
            *c /= nb;
        }
        let (mut n, mut sx, mut sy, mut sxx, mut syy, mut chroma) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let p = px(x, y);
                let d: f64 = (0..3).map(|c| (p[c] - border[c]).abs()).sum();
                if d > 40.0 {
                    let (fx, fy) = (x as f64, y as f64);
                    n += 1.0;
                    sx += fx;
                    sy += fy;
                    sxx += fx * fx;
                    syy += fy * fy;
                    let mx = p.iter().cloned().fold(0.0, f64::max);
                    let mn = p.iter().cloned().fold(255.0, f64::min);
                    chroma += (mx - mn) / 255.0;
                }
            }
        }
        let base = HeadShape::default();
        if n < 4.0 {
            return base;
        }
        // Rescale measurements from the observed image to the calibrated width.
        let to_cal = self.image_width as f64 / w as f64;
        let var_x = (sxx / n - (sx / n).powi(2)).max(1e-6);
        let var_y = (syy / n - (sy / n).powi(2)).max(1e-6);
        let aspect = (var_x / var_y).sqrt();
        // Projected ellipse area ≈ π a b (pixels); a/b from the moments.
        let area = n * to_cal * to_cal;
        let ab = area / std::f64::consts::PI / self.pixels_per_unit.powi(2);
        let unit_ab = base.axes[0] * base.axes[1];
        let scale = (ab / unit_ab).sqrt();
        let axes = [
            base.axes[0] * (aspect / (base.axes[0] / base.axes[1])).sqrt(),
            base.axes[1] / (aspect / (base.axes[0] / base.axes[1])).sqrt(),
            base.axes[2],
        ];
        HeadShape { scale, axes, nose: 0.08 + 0.1 * (chroma / n).clamp(0.0, 1.0) }
    }
}

impl MeshProvider for ToyParametricProvider {
    fn id(&self) -> &str {
        Self::ID
    }

    fn estimate(&self, image: &RgbImage) -> Result<HeadMesh> {
        HeadMesh::new(parametric_head(&self.shape_from_image(image)), Self::ID)
    }
}

/// Ignores the image and returns a fixed sphere; the ablation baseline.
#[derive(Debug, Clone, Copy)]
pub struct ConstantSphereProvider {
    pub radius: f64,
}

impl ConstantSphereProvider {
    pub const ID: &'static str = "constant-sphere";
}

impl Default for ConstantSphereProvider {
    fn default() -> Self {
        Self { radius: 0.7 }
    }
}

impl MeshProvider for ConstantSphereProvider {
    fn id(&self) -> &str {
        Self::ID
    }

    fn estimate(&self, _image: &RgbImage) -> Result<HeadMesh> {
        let unit = HeadShape { scale: 1.0, axes: [self.radius; 3], nose: 0.0 };
        let [a, b, c] = unit.semi_axes();
        let mut verts = Vec::new();
        for i in 0..=LAT_BANDS {
            let theta = std::f64::consts::PI * i as f64 / LAT_BANDS as f64;
            let ring = if i == 0 || i == LAT_BANDS { 1 } else { LON_BANDS };
            for j in 0..ring {
                let phi = 2.0 * std::f64::consts::PI * j as f64 / LON_BANDS as f64;
                verts.push([a * theta.sin() * phi.sin(), b * theta.cos(), c * theta.sin() * phi.cos()]);
            }
        }
        HeadMesh::new(verts, Self::ID)
    }
}

/// Named mesh providers. The two built-ins are always registered.
pub struct MeshProviders {
    providers: BTreeMap<String, Box<dyn MeshProvider>>,
}

impl MeshProviders {
    pub fn with_builtins(focal: f64, camera_radius: f64, image_width: usize) -> Self {
        let mut p = Self { providers: BTreeMap::new() };
        p.register(Box::new(ToyParametricProvider::new(focal, camera_radius, image_width)));
        p.register(Box::new(ConstantSphereProvider::default()));
        p
    }

    pub fn register(&mut self, provider: Box<dyn MeshProvider>) {
        self.providers.insert(provider.id().to_string(), provider);
    }

    pub fn get(&self, id: &str) -> Result<&dyn MeshProvider> {
        self.providers
            .get(id)
            .map(|p| p.as_ref())
            .ok_or_else(|| Error::UnknownProvider(id.to_string()))
    }

    pub fn ids(&self) -> Vec<&str> {
        self.providers.keys().map(|s| s.as_str()).collect()
    }
}

pub fn estimate_mesh(image: &RgbImage, provider: &str, providers: &MeshProviders) -> Result<HeadMesh> {
    providers.get(provider)?.estimate(image)
}

/// Occupied grid vertices with per-site features.
///
/// Features are `[occupancy, dx, dy, dz]`: occupancy is 1.0 and the offsets
/// are the mean vertex offset from the grid vertex, in units of grid spacing.
/// Indices are unique and sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseOccupancy {
    pub grid_size: usize,
    pub indices: Vec<[usize; 3]>,
    pub features: Vec<[f64; 4]>,
    /// Vertices that fell outside the grid and were clamped to its boundary.
    pub clamped: usize,
}

impl SparseOccupancy {
    pub const FEATURES: usize = 4;

    pub fn empty(grid_size: usize) -> Self {
        Self { grid_size, indices: Vec::new(), features: Vec::new(), clamped: 0 }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Nearest lattice index along one axis; exact midpoints go to the lower index.
fn nearest_index(g: f64, size: usize) -> (usize, bool) {
    let idx = (g - 0.5).ceil();
    if idx < 0.0 {
        (0, true)
    } else if idx > (size - 1) as f64 {
        (size - 1, true)
    } else {
        (idx as usize, false)
    }
}

pub fn voxelize_mesh(mesh: &HeadMesh, grid: &VoxelGrid) -> SparseOccupancy {
    let spacing = grid.spacing();
    let mut acc: BTreeMap<[usize; 3], ([f64; 3], usize)> = BTreeMap::new();
    let mut clamped = 0;
    for v in &mesh.vertices {
        let mut idx = [0usize; 3];
        let mut was_clamped = false;
        for a in 0..3 {
            let (i, c) = nearest_index(grid.to_lattice(v[a]), grid.size);
            idx[a] = i;
            was_clamped |= c;
        }
        if was_clamped {
            clamped += 1;
        }
        let center = grid.vertex(idx[0], idx[1], idx[2]);
        let entry = acc.entry(idx).or_insert(([0.0; 3], 0));
        for a in 0..3 {
            entry.0[a] += (v[a] - center[a]) / spacing;
        }
        entry.1 += 1;
    }
    let mut indices = Vec::with_capacity(acc.len());
    let mut features = Vec::with_capacity(acc.len());
    for (idx, (sum, n)) in acc {
        indices.push(idx);
        let n = n as f64;
        features.push([1.0, sum[0] / n, sum[1] / n, sum[2] / n]);
    }
    SparseOccupancy { grid_size: grid.size, indices, features, clamped }
}

/// On-disk cache entry for one identity's estimated mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshCacheEntry {
    pub identity: u32,
    pub seed: u64,
    pub provider: String,
    pub vertices: Vec<Vec3>,
}

pub fn write_mesh_cache(path: &Path, entry: &MeshCacheEntry) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_vec(entry)?)?;
    Ok(())
}

pub fn read_mesh_cache(path: &Path) -> Result<MeshCacheEntry> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
