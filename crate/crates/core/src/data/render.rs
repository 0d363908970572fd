//! Ray-cast renderer for the procedural head: an ellipsoid skull with
//! identity-colored eye, mouth and hair regions under Lambertian light.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::camera::{dot, normalize, pose_from_angles, Intrinsics, Vec3};
use crate::error::Result;
use crate::mesh::{HeadShape, EYE_LEFT, EYE_RIGHT, MOUTH, NOSE_TIP};
use crate::rng::SeededRng;

/// Generator style preset; stands in for real versus synthetic capture statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    RealProxy,
    SyntheticProxy,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::RealProxy => "real-proxy",
            Self::SyntheticProxy => "synthetic-proxy",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real-proxy" => Ok(Self::RealProxy),
            "synthetic-proxy" => Ok(Self::SyntheticProxy),
            _ => Err(crate::Error::Config(format!("unknown domain `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Style {
    background_top: Vec3,
    background_bottom: Vec3,
    light: Vec3,
    ambient: f64,
    light_tint: Vec3,
}

impl Domain {
    fn style(self) -> Style {
        match self {
            Self::RealProxy => Style {
                background_top: [0.62, 0.62, 0.64],
                background_bottom: [0.48, 0.47, 0.47],
                light: normalize([0.35, 0.55, 0.75]),
                ambient: 0.38,
                light_tint: [1.0, 0.96, 0.9],
            },
            Self::SyntheticProxy => Style {
                background_top: [0.16, 0.2, 0.32],
                background_bottom: [0.1, 0.12, 0.2],
                light: normalize([-0.3, 0.4, 0.85]),
                ambient: 0.22,
                light_tint: [0.92, 0.97, 1.0],
            },
        }
    }
}

/// Everything that makes one identity look like itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub shape: HeadShape,
    pub skin: Vec3,
    pub hair: Vec3,
    pub eyes: Vec3,
    pub lips: Vec3,
    /// Height on the unit head below which hair stops at the back.
    pub hairline: f64,
}

impl Appearance {
    pub fn sample(rng: &mut SeededRng) -> Self {
        let base = HeadShape::default();
        let jitter = |rng: &mut SeededRng, x: f64| x * rng.uniform_range(0.95, 1.05);
        let shape = HeadShape {
            scale: rng.uniform_range(0.85, 1.08),
            axes: [jitter(rng, base.axes[0]), jitter(rng, base.axes[1]), jitter(rng, base.axes[2])],
            nose: rng.uniform_range(0.08, 0.16),
        };
        let tone = rng.uniform_range(0.35, 0.95);
        let skin = [0.45 + 0.5 * tone, 0.3 + 0.45 * tone, 0.22 + 0.4 * tone];
        let h = rng.uniform();
        let hair = [0.08 + 0.55 * h * rng.uniform(), 0.05 + 0.35 * h, 0.03 + 0.2 * h * rng.uniform()];
        let eyes = [rng.uniform_range(0.05, 0.35), rng.uniform_range(0.1, 0.45), rng.uniform_range(0.1, 0.6)];
        let lips = [rng.uniform_range(0.55, 0.85), rng.uniform_range(0.15, 0.35), rng.uniform_range(0.2, 0.35)];
        Self { shape, skin, hair, eyes, lips, hairline: rng.uniform_range(-0.45, -0.1) }
    }

    /// Surface color at unit-head direction `n`.
    fn albedo(&self, n: Vec3) -> Vec3 {
        let ang = |d: Vec3| dot(n, normalize(d)).clamp(-1.0, 1.0).acos();
        for eye in [EYE_LEFT, EYE_RIGHT] {
            let a = ang(eye);
            if a < 0.05 {
                return [0.04, 0.04, 0.05];
            }
            if a < 0.11 {
                return self.eyes;
            }
            if a < 0.14 {
                return [0.92, 0.92, 0.9];
            }
        }
        let m = normalize(MOUTH);
        if n[2] > 0.0 && ((n[0] - m[0]) / 0.24).powi(2) + ((n[1] - m[1]) / 0.07).powi(2) < 1.0 {
            return self.lips;
        }
        let front_hair = n[1] > 0.55;
        let back_hair = n[2] < -0.15 && n[1] > self.hairline;
        let side_hair = n[2] < 0.25 && n[1] > 0.3;
        if front_hair || back_hair || side_hair {
            return self.hair;
        }
        if ang(NOSE_TIP) < 0.16 {
            return [self.skin[0] * 0.97, self.skin[1] * 0.86, self.skin[2] * 0.84];
        }
        self.skin
    }
}

/// Camera setup of a rendered corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderCamera {
    pub image_size: usize,
    pub focal: f64,
    pub radius: f64,
    pub elevation: f64,
}

impl RenderCamera {
    pub fn desk(image_size: usize) -> Self {
        Self { image_size, focal: 1.3 * image_size as f64, radius: 2.7, elevation: 0.0 }
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::centered(self.focal, self.image_size, self.image_size)
    }
}

/// Renders one view with 2x2 supersampling.
pub fn render_view(app: &Appearance, domain: Domain, camera: &RenderCamera, azimuth: f64) -> Result<RgbImage> {
    let style = domain.style();
    let pose = pose_from_angles(azimuth, camera.elevation, camera.radius)?;
    let k = camera.intrinsics()?;
    let center = pose.center();
    let axes = app.shape.semi_axes();
    let s = camera.image_size;
    let mut img = RgbImage::new(s as u32, s as u32);
    for v in 0..s {
        for u in 0..s {
            let mut acc = [0.0; 3];
            for (du, dv) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                let (uu, vv) = (u as f64 + du, v as f64 + dv);
                let c = match hit(center, pose.camera_to_world_dir(k.ray(uu, vv)), axes) {
                    Some(p) => shade(app, &style, p, axes),
                    None => {
                        let f = vv / s as f64;
                        [0, 1, 2].map(|i| style.background_top[i] * (1.0 - f) + style.background_bottom[i] * f)
                    }
                };
                for i in 0..3 {
                    acc[i] += c[i] / 4.0;
                }
            }
            img.put_pixel(u as u32, v as u32, Rgb(acc.map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)));
        }
    }
    Ok(img)
}

fn hit(origin: Vec3, dir: Vec3, axes: Vec3) -> Option<Vec3> {
    let q = [origin[0] / axes[0], origin[1] / axes[1], origin[2] / axes[2]];
    let d = [dir[0] / axes[0], dir[1] / axes[1], dir[2] / axes[2]];
    let a = dot(d, d);
    let b = 2.0 * dot(q, d);
    let c = dot(q, q) - 1.0;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / (2.0 * a);
    (t > 0.0).then(|| [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]])
}

fn shade(app: &Appearance, style: &Style, p: Vec3, axes: Vec3) -> Vec3 {
    let normal = normalize([p[0] / axes[0].powi(2), p[1] / axes[1].powi(2), p[2] / axes[2].powi(2)]);
    let unit = normalize([p[0] / axes[0], p[1] / axes[1], p[2] / axes[2]]);
    let albedo = app.albedo(unit);
    let lambert = dot(normal, style.light).max(0.0);
    let light = style.ambient + (1.0 - style.ambient) * lambert;
    [0, 1, 2].map(|i| albedo[i] * light * style.light_tint[i])
}

/// Separable Gaussian blur; used to plant soft frontal renders into back views.
pub fn blur(img: &RgbImage, sigma: f32) -> RgbImage {
    image::imageops::blur(img, sigma)
}
