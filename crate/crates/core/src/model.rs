//! The full noise predictor: conditioning chain plus denoiser, behind one trait.

use candle_core::{DType, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::camera::{build_voxel_grid, pose_from_angles, CameraPose, Intrinsics};
use crate::conditioning::{Aggregation, Conditioner, ConditioningConfig, Rig, SparseGeometry};
use crate::denoiser::{AttentionMode, Denoiser, DenoiserConfig};
use crate::diffusion::{LatentMode, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imageio::image_to_tensor;
use crate::mesh::{estimate_mesh, voxelize_mesh, MeshProviders, SparseOccupancy};
use crate::nn::{NeighborCache, ParamBuilder, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub latent: LatentMode,
    /// Focal length in units of image width.
    pub focal_ratio: f64,
    pub radius: f64,
    pub elevation: f64,
    pub grid_size: usize,
    pub extent: f64,
    pub context_channels: usize,
    pub context_down: usize,
    pub geometry_channels: usize,
    pub frustum_size: usize,
    pub depth_samples: usize,
    pub frustum_channels: usize,
    pub aggregation: Aggregation,
    pub base_channels: usize,
    pub attention_max_size: usize,
    pub attention: AttentionMode,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            latent: LatentMode::Pixel,
            focal_ratio: 1.3,
            radius: 2.7,
            elevation: 0.0,
            grid_size: 8,
            extent: 1.0,
            context_channels: 8,
            context_down: 2,
            geometry_channels: 8,
            frustum_size: 16,
            depth_samples: 8,
            frustum_channels: 8,
            aggregation: Aggregation::Concat,
            base_channels: 16,
            attention_max_size: 8,
            attention: AttentionMode::Joint,
        }
    }

    /// `(channels, side)` of the representation the diffusion runs in.
    pub fn latent_shape(&self) -> (usize, usize) {
        let (c, h, _) = self.latent.latent_dims(3, self.image_size, self.image_size);
        (c, h)
    }

    pub fn focal(&self) -> f64 {
        self.focal_ratio * self.image_size as f64
    }

    pub fn conditioning(&self) -> ConditioningConfig {
        ConditioningConfig {
            image_channels: self.latent_shape().0,
            context_channels: self.context_channels,
            context_down: self.context_down,
            geometry_channels: self.geometry_channels,
            frustum_size: self.frustum_size,
            depth_samples: self.depth_samples,
            frustum_channels: self.frustum_channels,
            aggregation: self.aggregation,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            image_channels: self.latent_shape().0,
            base_channels: self.base_channels,
            attention_max_size: self.attention_max_size,
            attention: self.attention,
        }
    }

    pub fn pose(&self, azimuth: f64) -> Result<CameraPose> {
        pose_from_angles(azimuth, self.elevation, self.radius)
    }

    pub fn mesh_providers(&self) -> MeshProviders {
        MeshProviders::with_builtins(self.focal(), self.radius, self.image_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!("image_size must be a positive multiple of 8, got {}", self.image_size)));
        }
        if self.grid_size < 2 || self.extent <= 0.0 || self.radius <= self.extent || self.focal_ratio <= 0.0 {
            return Err(Error::Config("grid_size >= 2 and 0 < extent < radius required".into()));
        }
        self.conditioning().validate(self.latent_shape().1)
    }
}

/// Everything the predictor sees besides the noisy views.
#[derive(Debug, Clone)]
pub struct Condition {
    /// Clean input `(1, C, s, s)` in the diffusion representation.
    pub y: Tensor,
    pub y_pose: CameraPose,
    pub geometry: SparseGeometry,
}

impl Condition {
    /// Encodes the input image and voxelizes the mesh estimated from it.
    pub fn from_image(image: &RgbImage, y_azimuth: f64, cfg: &ModelConfig, provider: &str, providers: &MeshProviders, dtype: DType) -> Result<Self> {
        let occ = estimate_occupancy(image, cfg, provider, providers)?;
        Self::from_parts(image, y_azimuth, &occ, cfg, dtype)
    }

    pub fn from_parts(image: &RgbImage, y_azimuth: f64, occ: &SparseOccupancy, cfg: &ModelConfig, dtype: DType) -> Result<Self> {
        let y = cfg.latent.encode(&image_to_tensor(image, cfg.image_size, dtype)?)?;
        Ok(Self { y, y_pose: cfg.pose(y_azimuth)?, geometry: SparseGeometry::new(occ, dtype)? })
    }
}

pub fn estimate_occupancy(image: &RgbImage, cfg: &ModelConfig, provider: &str, providers: &MeshProviders) -> Result<SparseOccupancy> {
    let grid = build_voxel_grid(cfg.grid_size, cfg.extent)?;
    let img = if image.width() as usize == cfg.image_size && image.height() as usize == cfg.image_size {
        image.clone()
    } else {
        let s = cfg.image_size as u32;
        image::imageops::resize(image, s, s, image::imageops::FilterType::Triangle)
    };
    let mesh = estimate_mesh(&img, provider, providers)?.normalized_to(&grid);
    Ok(voxelize_mesh(&mesh, &grid))
}

/// Predicts per-view noise for a subset of target views sharing timestep `t`.
///
/// `views` are indices of the subset within the full target set; learned
/// models ignore them, oracles use them to look up planted data.
pub trait EpsPredictor {
    fn predict(&self, x_t: &Tensor, t: usize, views: &[usize], poses: &[CameraPose], cond: &Condition) -> Result<Tensor>;
}

pub struct Gen3dModel {
    pub config: ModelConfig,
    pub rig: Rig,
    pub conditioner: Conditioner,
    pub denoiser: Denoiser,
    pub store: ParamStore,
    cache: NeighborCache,
}

impl Gen3dModel {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let (_, side) = config.latent_shape();
        let intrinsics = Intrinsics::centered(config.focal(), config.image_size, config.image_size)?.rescaled(side, side);
        let rig = Rig::new(intrinsics, build_voxel_grid(config.grid_size, config.extent)?, config.radius)?;
        let mut pb = ParamBuilder::new(seed, dtype);
        let conditioner = Conditioner::new(&mut pb, &config.conditioning())?;
        let [f0, f1] = conditioner.frustum.level_channels();
        let fs = config.frustum_size;
        let denoiser = Denoiser::new(&mut pb, &config.denoiser(), side, &[(fs, f0), (fs / 2, f1)])?;
        Ok(Self { config: config.clone(), rig, conditioner, denoiser, store: pb.finish(), cache: NeighborCache::default() })
    }

    pub fn dtype(&self) -> DType {
        self.denoiser.dtype()
    }

    pub fn set_attention(&mut self, mode: AttentionMode) {
        self.denoiser.set_attention(mode);
    }
}

impl EpsPredictor for Gen3dModel {
    fn predict(&self, x_t: &Tensor, t: usize, _views: &[usize], poses: &[CameraPose], cond: &Condition) -> Result<Tensor> {
        let fvf = self.conditioner.condition(x_t, t, poses, &cond.geometry, &self.rig, &self.cache)?;
        self.denoiser.predict_noise(x_t, &cond.y, &fvf, t, poses, &cond.y_pose)
    }
}

/// Returns the exact noise for planted clean views `x0` `(N, C, s, s)`.
pub struct PlantedOracle {
    pub x0: Tensor,
    pub schedule: NoiseSchedule,
}

impl EpsPredictor for PlantedOracle {
    fn predict(&self, x_t: &Tensor, t: usize, views: &[usize], _poses: &[CameraPose], _cond: &Condition) -> Result<Tensor> {
        let idx = Tensor::from_vec(views.iter().map(|&v| v as u32).collect::<Vec<_>>(), views.len(), x_t.device())?;
        let x0 = self.x0.index_select(&idx, 0)?.to_dtype(x_t.dtype())?;
        let ab = self.schedule.alpha_bar(t);
        Ok((x_t - x0.affine(ab.sqrt(), 0.0)?)?.affine(1.0 / (1.0 - ab).sqrt(), 0.0)?)
    }
}

pub struct ZeroPredictor;

impl EpsPredictor for ZeroPredictor {
    fn predict(&self, x_t: &Tensor, _t: usize, _views: &[usize], _poses: &[CameraPose], _cond: &Condition) -> Result<Tensor> {
        Ok(x_t.zeros_like()?)
    }
}
