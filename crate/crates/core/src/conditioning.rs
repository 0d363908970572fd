//! The conditioning chain: per-view context features, the appearance volume
//! `F_a`, the mesh-fused hybrid volume `F_ag`, and per-view frustum volumes
//! `F_vf`.
//!
//! Volumes are `(sites, channels)` tensors with sites in grid-linear order.

use std::collections::HashMap;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::camera::{
    depth_samples, frustum_points, sample_view_features, CameraPose, GatherPlan, Intrinsics, TrilinearPlan, Vec3,
    VoxelGrid,
};
use crate::error::{Error, Result};
use crate::mesh::SparseOccupancy;
use crate::nn::{
    pool3d, pose_features, sinusoidal, upsample3d, with_zero_row, Conv2d, Linear, NeighborCache, ParamBuilder,
    StencilConv, POSE_FEATURES, STENCIL,
};

/// Width of the joint time + pose embedding fed to every conditioned block.
pub const EMBED_FEATURES: usize = 16 + POSE_FEATURES;

/// Sinusoidal timestep features followed by camera-angle features.
pub fn embedding_features(t: usize, pose: &CameraPose) -> Vec<f64> {
    let mut f = sinusoidal(&[t as f64], 16, 1000.0);
    f.extend(pose_features(pose.azimuth, pose.elevation));
    f
}

pub fn embedding_tensor(ts: &[usize], poses: &[CameraPose], dtype: DType) -> Result<Tensor> {
    if ts.len() != poses.len() {
        return Err(Error::shape(poses.len(), ts.len()));
    }
    let data: Vec<f64> = ts.iter().zip(poses).flat_map(|(&t, p)| embedding_features(t, p)).collect();
    Ok(Tensor::from_vec(data, (ts.len(), EMBED_FEATURES), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// One channel block per view, in the order given.
    Concat,
    /// A single block averaged over views.
    Mean,
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Self::Concat),
            "mean" => Ok(Self::Mean),
            _ => Err(Error::Config(format!("unknown aggregation `{s}`"))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Concat => "concat",
            Self::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningConfig {
    pub image_channels: usize,
    pub context_channels: usize,
    /// Average-pool factor between view and context resolution.
    pub context_down: usize,
    pub geometry_channels: usize,
    pub frustum_size: usize,
    pub depth_samples: usize,
    pub frustum_channels: usize,
    pub aggregation: Aggregation,
}

impl ConditioningConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.context_down == 0 || image_size % self.context_down != 0 {
            return bad("context_down must divide the image size");
        }
        if self.frustum_size < 2 || self.frustum_size % 2 != 0 {
            return bad("frustum_size must be even and >= 2");
        }
        if self.depth_samples < 2 || self.depth_samples % 2 != 0 {
            return bad("depth_samples must be even and >= 2");
        }
        if [self.image_channels, self.context_channels, self.geometry_channels, self.frustum_channels].contains(&0) {
            return bad("channel counts must be positive");
        }
        Ok(())
    }
}

/// Camera setup shared by all views of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    /// Intrinsics at the resolution the denoiser works in.
    pub intrinsics: Intrinsics,
    pub grid: VoxelGrid,
    pub near: f64,
    pub far: f64,
}

impl Rig {
    /// Near and far default to `radius -/+ extent`.
    pub fn new(intrinsics: Intrinsics, grid: VoxelGrid, radius: f64) -> Result<Self> {
        let near = radius - grid.extent;
        if near <= 0.0 {
            return Err(Error::Config(format!("camera radius {radius} must exceed grid extent {}", grid.extent)));
        }
        Ok(Self { intrinsics, grid, near, far: radius + grid.extent })
    }
}

/// Per-view context maps `(k, C, H', W')`.
#[derive(Debug, Clone)]
pub struct ViewContextFeatures(pub Tensor);

#[derive(Debug, Clone)]
pub struct ViewContextEncoder {
    conv1: Conv2d,
    conv2: Conv2d,
    embed: Linear,
    down: usize,
}

impl ViewContextEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ConditioningConfig) -> Result<Self> {
        pb.push("context");
        let conv1 = Conv2d::new(pb, "conv1", cfg.image_channels, cfg.context_channels, 3);
        let conv2 = Conv2d::new(pb, "conv2", cfg.context_channels, cfg.context_channels, 3);
        let embed = Linear::new(pb, "embed", EMBED_FEATURES, cfg.context_channels);
        pb.pop();
        Ok(Self { conv1: conv1?, conv2: conv2?, embed: embed?, down: cfg.context_down })
    }

    /// Encodes `(k, C_in, H, W)` noisy views with their timesteps and poses.
    pub fn encode(&self, x_t: &Tensor, ts: &[usize], poses: &[CameraPose]) -> Result<ViewContextFeatures> {
        let k = x_t.dims4()?.0;
        if ts.len() != k || poses.len() != k {
            return Err(Error::shape(k, (ts.len(), poses.len())));
        }
        let mut h = self.conv2.forward(&self.conv1.forward(x_t)?.silu()?)?;
        if self.down > 1 {
            h = h.avg_pool2d(self.down)?;
        }
        let e = self.embed.forward(&embedding_tensor(ts, poses, x_t.dtype())?)?;
        let c = e.dims2()?.1;
        Ok(ViewContextFeatures(h.broadcast_add(&e.reshape((k, c, 1, 1))?)?))
    }
}

/// `F_a`: `(L^3, blocks * C)` features with one validity channel per block.
#[derive(Debug, Clone)]
pub struct AppearanceVolume {
    pub features: Tensor,
    pub validity: Tensor,
    pub blocks: usize,
    pub channels: usize,
}

impl AppearanceVolume {
    /// Block `n` as `(L^3, C)`.
    pub fn block(&self, n: usize) -> Result<Tensor> {
        Ok(self.features.narrow(1, n * self.channels, self.channels)?)
    }
}

pub fn build_appearance_volume(
    contexts: &ViewContextFeatures,
    poses: &[CameraPose],
    rig: &Rig,
    aggregation: Aggregation,
) -> Result<AppearanceVolume> {
    let (k, c, h, w) = contexts.0.dims4()?;
    if poses.len() != k {
        return Err(Error::shape(k, poses.len()));
    }
    let kc = rig.intrinsics.rescaled(w, h);
    let mut feats = Vec::with_capacity(k);
    let mut valid = Vec::with_capacity(k);
    for (n, pose) in poses.iter().enumerate() {
        let (f, v) = sample_view_features(&contexts.0.get(n)?, pose, &kc, &rig.grid)?;
        feats.push(f);
        valid.push(v);
    }
    let features = Tensor::cat(&feats, 1)?;
    let validity = Tensor::cat(&valid, 1)?;
    Ok(match aggregation {
        Aggregation::Concat => AppearanceVolume { features, validity, blocks: k, channels: c },
        Aggregation::Mean => {
            let sites = rig.grid.len();
            AppearanceVolume {
                features: features.reshape((sites, k, c))?.mean(1)?,
                validity: validity.mean_keepdim(1)?,
                blocks: 1,
                channels: c,
            }
        }
    })
}

/// Index tables for running the two-level sparse convolution over one occupancy.
#[derive(Debug, Clone)]
pub struct SparseGeometry {
    /// `(M, 4)` per-site input features.
    pub features: Tensor,
    sites: usize,
    fine_table: Tensor,
    parents: Tensor,
    coarse_sites: usize,
    coarse_counts: Tensor,
    coarse_table: Tensor,
    dense_map: Tensor,
}

fn sparse_table(sites: &[[usize; 3]]) -> Vec<u32> {
    let lookup: HashMap<[usize; 3], u32> = sites.iter().enumerate().map(|(n, s)| (*s, n as u32)).collect();
    let sentinel = sites.len() as u32;
    let mut out = Vec::with_capacity(sites.len() * STENCIL);
    for s in sites {
        for a in -1isize..=1 {
            for b in -1isize..=1 {
                for c in -1isize..=1 {
                    let n = [s[0] as isize + a, s[1] as isize + b, s[2] as isize + c];
                    let hit = if n.iter().all(|&x| x >= 0) {
                        lookup.get(&n.map(|x| x as usize)).copied()
                    } else {
                        None
                    };
                    out.push(hit.unwrap_or(sentinel));
                }
            }
        }
    }
    out
}

impl SparseGeometry {
    pub fn new(occ: &SparseOccupancy, dtype: DType) -> Result<Self> {
        let dev = Device::Cpu;
        let m = occ.len();
        let l = occ.grid_size;
        let flat: Vec<f64> = occ.features.iter().flatten().copied().collect();
        let features = Tensor::from_vec(flat, (m, SparseOccupancy::FEATURES), &dev)?.to_dtype(dtype)?;

        let mut coarse: Vec<[usize; 3]> = occ.indices.iter().map(|s| s.map(|x| x / 2)).collect();
        coarse.sort_unstable();
        coarse.dedup();
        let coarse_row: HashMap<[usize; 3], u32> = coarse.iter().enumerate().map(|(n, s)| (*s, n as u32)).collect();
        let parents: Vec<u32> = occ.indices.iter().map(|s| coarse_row[&s.map(|x| x / 2)]).collect();
        let mut counts = vec![0.0f64; coarse.len()];
        for &p in &parents {
            counts[p as usize] += 1.0;
        }

        let mut dense_map = vec![m as u32; l * l * l];
        for (n, s) in occ.indices.iter().enumerate() {
            dense_map[(s[0] * l + s[1]) * l + s[2]] = n as u32;
        }

        Ok(Self {
            features,
            sites: m,
            fine_table: Tensor::from_vec(sparse_table(&occ.indices), m * STENCIL, &dev)?,
            parents: Tensor::from_vec(parents, m, &dev)?,
            coarse_sites: coarse.len(),
            coarse_counts: Tensor::from_vec(counts, (coarse.len(), 1), &dev)?.to_dtype(dtype)?,
            coarse_table: Tensor::from_vec(sparse_table(&coarse), coarse.len() * STENCIL, &dev)?,
            dense_map: Tensor::from_vec(dense_map, l * l * l, &dev)?,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.sites == 0
    }
}

/// `F_ag` as a dense `(L^3, C_g)` tensor.
#[derive(Debug, Clone)]
pub struct HybridVolume(pub Tensor);

#[derive(Debug, Clone)]
pub struct GeometryFuser {
    pub sparse_fine: StencilConv,
    pub sparse_coarse: StencilConv,
    pub appearance: Linear,
    pub dense1: StencilConv,
    pub dense2: StencilConv,
    channels: usize,
}

impl GeometryFuser {
    pub fn new(pb: &mut ParamBuilder, cfg: &ConditioningConfig) -> Result<Self> {
        let g = cfg.geometry_channels;
        pb.push("fuse");
        let out = (|| {
            Ok(Self {
                sparse_fine: StencilConv::new(pb, "sparse_fine", SparseOccupancy::FEATURES, g)?,
                sparse_coarse: StencilConv::new(pb, "sparse_coarse", g, g)?,
                appearance: Linear::new(pb, "appearance", cfg.context_channels + 1, g)?,
                dense1: StencilConv::new(pb, "dense1", 2 * g, g)?,
                dense2: StencilConv::new(pb, "dense2", g, g)?,
                channels: g,
            })
        })();
        pb.pop();
        out
    }

    /// Sparse geometry branch scattered to a dense `(L^3, C_g)` tensor.
    pub fn geometry_branch(&self, geom: &SparseGeometry, sites: usize) -> Result<Tensor> {
        let dtype = geom.features.dtype();
        if geom.is_empty() {
            return Ok(Tensor::zeros((sites, self.channels), dtype, &Device::Cpu)?);
        }
        let fine = self.sparse_fine.forward(&geom.features, &geom.fine_table)?.silu()?;
        let pooled = Tensor::zeros((geom.coarse_sites, self.channels), dtype, &Device::Cpu)?
            .index_add(&geom.parents, &fine, 0)?
            .broadcast_div(&geom.coarse_counts)?;
        let coarse = self.sparse_coarse.forward(&pooled, &geom.coarse_table)?.silu()?;
        let merged = (fine + coarse.index_select(&geom.parents, 0)?)?;
        Ok(with_zero_row(&merged)?.index_select(&geom.dense_map, 0)?)
    }

    /// Shared per-block projection of `F_a`, averaged over blocks.
    pub fn appearance_branch(&self, fa: &AppearanceVolume) -> Result<Tensor> {
        let sites = fa.features.dims2()?.0;
        let f = fa.features.reshape((sites, fa.blocks, fa.channels))?;
        let v = fa.validity.reshape((sites, fa.blocks, 1))?;
        Ok(self.appearance.forward(&Tensor::cat(&[f, v], 2)?)?.mean(1)?)
    }

    pub fn dense_stage(&self, geometry: &Tensor, appearance: &Tensor, grid: &VoxelGrid, cache: &NeighborCache) -> Result<Tensor> {
        let l = grid.size;
        let table = cache.dense(1, [l, l, l])?;
        let h = self.dense1.forward(&Tensor::cat(&[geometry, appearance], 1)?, &table)?.silu()?;
        self.dense2.forward(&h, &table)
    }
}

pub fn fuse_geometry(
    fa: &AppearanceVolume,
    geom: &SparseGeometry,
    fuser: &GeometryFuser,
    grid: &VoxelGrid,
    cache: &NeighborCache,
) -> Result<HybridVolume> {
    let sites = fa.features.dims2()?.0;
    if sites != grid.len() || geom.dense_map.dims1()? != grid.len() {
        return Err(Error::shape(grid.len(), (sites, geom.dense_map.dims1()?)));
    }
    let g = fuser.geometry_branch(geom, sites)?;
    let a = fuser.appearance_branch(fa)?;
    Ok(HybridVolume(fuser.dense_stage(&g, &a, grid, cache)?))
}

/// Multi-resolution frustum features for `k` target views. Level `r` is
/// `(k, D_r, H_r, W_r, C_r)`; each level halves every spatial axis.
#[derive(Debug, Clone)]
pub struct FrustumVolume {
    pub levels: Vec<Tensor>,
    pub depths: Vec<f64>,
}

/// Raw frustum samples of `F_ag` before the network.
#[derive(Debug, Clone)]
pub struct FrustumSamples {
    /// `(k * D * H * W, C_g)`, ordered `(view, depth, row, col)`.
    pub features: Tensor,
    /// `(k * D * H * W, 1)`; one where the sample point lies inside the grid.
    pub validity: Tensor,
    pub points: Vec<Vec3>,
    pub depths: Vec<f64>,
}

pub fn sample_frustum(fag: &HybridVolume, poses: &[CameraPose], rig: &Rig, size: usize, depth: usize) -> Result<FrustumSamples> {
    let k = rig.intrinsics.rescaled(size, size);
    let depths = depth_samples(rig.near, rig.far, depth)?;
    let mut feats = Vec::with_capacity(poses.len());
    let mut valid = Vec::with_capacity(poses.len());
    let mut points = Vec::new();
    for pose in poses {
        let pts = frustum_points(pose, &k, &depths);
        let plan = GatherPlan::trilinear(&TrilinearPlan::new(&pts, &rig.grid), fag.0.dtype())?;
        feats.push(plan.apply(&fag.0)?);
        valid.push(plan.validity().clone());
        points.extend(pts);
    }
    Ok(FrustumSamples {
        features: Tensor::cat(&feats, 0)?,
        validity: Tensor::cat(&valid, 0)?,
        points,
        depths,
    })
}

/// Two-level 3D UNet over frustum samples, conditioned on time and viewpoint.
#[derive(Debug, Clone)]
pub struct FrustumNet {
    conv_in: StencilConv,
    embed_in: Linear,
    conv0: StencilConv,
    conv1: StencilConv,
    embed1: Linear,
    conv1b: StencilConv,
    up: StencilConv,
    pub size: usize,
    pub depth: usize,
}

impl FrustumNet {
    pub fn new(pb: &mut ParamBuilder, cfg: &ConditioningConfig) -> Result<Self> {
        let (g, f) = (cfg.geometry_channels, cfg.frustum_channels);
        pb.push("frustum");
        let out = (|| {
            Ok(Self {
                conv_in: StencilConv::new(pb, "conv_in", g + 1, f)?,
                embed_in: Linear::new(pb, "embed_in", EMBED_FEATURES, f)?,
                conv0: StencilConv::new(pb, "conv0", f, f)?,
                conv1: StencilConv::new(pb, "conv1", f, 2 * f)?,
                embed1: Linear::new(pb, "embed1", EMBED_FEATURES, 2 * f)?,
                conv1b: StencilConv::new(pb, "conv1b", 2 * f, 2 * f)?,
                up: StencilConv::new(pb, "up", 3 * f, f)?,
                size: cfg.frustum_size,
                depth: cfg.depth_samples,
            })
        })();
        pb.pop();
        out
    }

    /// Channel widths of the output pyramid, finest first.
    pub fn level_channels(&self) -> [usize; 2] {
        let f = self.conv0.output;
        [f, 2 * f]
    }

    fn add_embedding(h: &Tensor, e: &Tensor, k: usize) -> Result<Tensor> {
        let (rows, c) = h.dims2()?;
        let e = e.reshape((k, 1, c))?.broadcast_as((k, rows / k, c))?.reshape((rows, c))?;
        Ok((h + e)?)
    }

    pub fn forward(&self, samples: &FrustumSamples, embed: &Tensor, cache: &NeighborCache) -> Result<FrustumVolume> {
        let k = embed.dims2()?.0;
        let (d, s) = (self.depth, self.size);
        let f = self.conv0.output;
        let t0 = cache.dense(k, [d, s, s])?;
        let t1 = cache.dense(k, [d / 2, s / 2, s / 2])?;

        let x = Tensor::cat(&[&samples.features, &samples.validity], 1)?;
        let h = Self::add_embedding(&self.conv_in.forward(&x, &t0)?, &self.embed_in.forward(embed)?, k)?.silu()?;
        let h0 = self.conv0.forward(&h, &t0)?.silu()?;

        let p = pool3d(&h0.reshape((k, d, s, s, f))?)?.reshape((k * (d / 2) * (s / 2) * (s / 2), f))?;
        let h1 = Self::add_embedding(&self.conv1.forward(&p, &t1)?, &self.embed1.forward(embed)?, k)?.silu()?;
        let h1 = self.conv1b.forward(&h1, &t1)?.silu()?;
        let level1 = h1.reshape((k, d / 2, s / 2, s / 2, 2 * f))?;

        let u = upsample3d(&level1)?.reshape((k * d * s * s, 2 * f))?;
        let level0 = self.up.forward(&Tensor::cat(&[&u, &h0], 1)?, &t0)?.silu()?.reshape((k, d, s, s, f))?;
        Ok(FrustumVolume { levels: vec![level0, level1], depths: samples.depths.clone() })
    }
}

pub fn build_frustum_volume(
    fag: &HybridVolume,
    poses: &[CameraPose],
    ts: &[usize],
    rig: &Rig,
    net: &FrustumNet,
    cache: &NeighborCache,
) -> Result<FrustumVolume> {
    let samples = sample_frustum(fag, poses, rig, net.size, net.depth)?;
    let embed = embedding_tensor(ts, poses, fag.0.dtype())?;
    net.forward(&samples, &embed, cache)
}

/// All conditioning networks together.
#[derive(Debug, Clone)]
pub struct Conditioner {
    pub encoder: ViewContextEncoder,
    pub fuser: GeometryFuser,
    pub frustum: FrustumNet,
    pub aggregation: Aggregation,
}

impl Conditioner {
    pub fn new(pb: &mut ParamBuilder, cfg: &ConditioningConfig) -> Result<Self> {
        Ok(Self {
            encoder: ViewContextEncoder::new(pb, cfg)?,
            fuser: GeometryFuser::new(pb, cfg)?,
            frustum: FrustumNet::new(pb, cfg)?,
            aggregation: cfg.aggregation,
        })
    }

    /// Runs encode, `F_a`, `F_ag` and `F_vf` for `k` noisy views sharing one timestep.
    pub fn condition(
        &self,
        x_t: &Tensor,
        t: usize,
        poses: &[CameraPose],
        geom: &SparseGeometry,
        rig: &Rig,
        cache: &NeighborCache,
    ) -> Result<FrustumVolume> {
        let ts = vec![t; poses.len()];
        let ctx = self.encoder.encode(x_t, &ts, poses)?;
        let fa = build_appearance_volume(&ctx, poses, rig, self.aggregation)?;
        let fag = fuse_geometry(&fa, geom, &self.fuser, &rig.grid, cache)?;
        build_frustum_volume(&fag, poses, &ts, rig, &self.frustum, cache)
    }
}
