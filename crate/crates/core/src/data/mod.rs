//! Procedural multi-view identity corpus, its on-disk format, and pruning.

pub mod backends;
pub mod prune;
pub mod render;

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub use render::{Appearance, Domain, RenderCamera};

pub const VIEWS_PER_IDENTITY: usize = 24;

/// The 24 generator azimuths, `-180, -165, ..., 165`.
pub fn identity_azimuths() -> Vec<f64> {
    (0..VIEWS_PER_IDENTITY).map(|i| -180.0 + 360.0 * i as f64 / VIEWS_PER_IDENTITY as f64).collect()
}

/// A defect deliberately written into a view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Planted {
    /// Back view replaced by a blurred frontal render.
    Janus,
    /// View rendered from a different identity.
    Swap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub azimuth: f64,
    pub elevation: f64,
    pub image: RgbImage,
    pub planted: Option<Planted>,
    /// Front-face score, set once the view has been classified.
    pub front_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityRecord {
    pub id: u32,
    pub seed: u64,
    pub domain: Domain,
    pub appearance: Appearance,
    pub camera: RenderCamera,
    pub views: Vec<ViewRecord>,
    /// Mean pairwise embedding similarity, set once the identity has been ranked.
    pub consistency: Option<f64>,
}

impl IdentityRecord {
    pub fn view_at(&self, azimuth: f64) -> Option<&ViewRecord> {
        self.views.iter().find(|v| (v.azimuth - azimuth).abs() < 1e-9)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    /// View indices (into the 24 azimuths) to overwrite with a blurred front view.
    pub janus: Vec<usize>,
    /// View indices to render from another identity.
    pub swap: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub camera: RenderCamera,
    pub domain: Domain,
    pub corruption: Corruption,
}

impl GeneratorConfig {
    pub fn desk(domain: Domain) -> Self {
        Self { camera: RenderCamera::desk(64), domain, corruption: Corruption::default() }
    }
}

pub fn is_back_view(azimuth: f64) -> bool {
    azimuth.abs() > 90.0
}

pub fn generate_identity(id: u32, seed: u64, cfg: &GeneratorConfig) -> Result<IdentityRecord> {
    let azimuths = identity_azimuths();
    for &i in cfg.corruption.janus.iter().chain(&cfg.corruption.swap) {
        if i >= azimuths.len() {
            return Err(Error::invalid(format!("view index {i} out of range")));
        }
    }
    if let Some(&i) = cfg.corruption.janus.iter().find(|&&i| !is_back_view(azimuths[i])) {
        return Err(Error::invalid(format!("janus view {i} (azimuth {}) is not a back view", azimuths[i])));
    }
    let appearance = Appearance::sample(&mut SeededRng::derive(seed, 1));
    let impostor = Appearance::sample(&mut SeededRng::derive(seed, 2));
    let front = render::render_view(&appearance, cfg.domain, &cfg.camera, 0.0)?;
    let blurred = render::blur(&front, 1.5);
    let mut views = Vec::with_capacity(azimuths.len());
    for (i, &az) in azimuths.iter().enumerate() {
        let (image, planted) = if cfg.corruption.janus.contains(&i) {
            (blurred.clone(), Some(Planted::Janus))
        } else if cfg.corruption.swap.contains(&i) {
            (render::render_view(&impostor, cfg.domain, &cfg.camera, az)?, Some(Planted::Swap))
        } else if az == 0.0 {
            (front.clone(), None)
        } else {
            (render::render_view(&appearance, cfg.domain, &cfg.camera, az)?, None)
        };
        views.push(ViewRecord { azimuth: az, elevation: cfg.camera.elevation, image, planted, front_score: None });
    }
    Ok(IdentityRecord { id, seed, domain: cfg.domain, appearance, camera: cfg.camera, views, consistency: None })
}

/// Which generator domains a corpus or training run draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataMix {
    RealProxy,
    SyntheticProxy,
    Both,
}

impl DataMix {
    pub fn admits(self, d: Domain) -> bool {
        match self {
            Self::Both => true,
            Self::RealProxy => d == Domain::RealProxy,
            Self::SyntheticProxy => d == Domain::SyntheticProxy,
        }
    }

    /// Domain of the `i`-th identity of a generated corpus.
    pub fn domain_for(self, i: usize) -> Domain {
        match self {
            Self::RealProxy => Domain::RealProxy,
            Self::SyntheticProxy => Domain::SyntheticProxy,
            Self::Both if i % 2 == 0 => Domain::RealProxy,
            Self::Both => Domain::SyntheticProxy,
        }
    }
}

impl std::str::FromStr for DataMix {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real-proxy" => Ok(Self::RealProxy),
            "synthetic-proxy" => Ok(Self::SyntheticProxy),
            "both" => Ok(Self::Both),
            _ => Err(Error::Config(format!("unknown data mix `{s}`"))),
        }
    }
}

impl std::fmt::Display for DataMix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::RealProxy => "real-proxy",
            Self::SyntheticProxy => "synthetic-proxy",
            Self::Both => "both",
        })
    }
}

/// Identities `0..count`, seeds drawn from `seed`, domains from `mix`.
pub fn generate_corpus(count: usize, seed: u64, mix: DataMix, image_size: usize) -> Result<Vec<IdentityRecord>> {
    let mut rng = SeededRng::derive(seed, 0xc0);
    (0..count)
        .map(|i| {
            let s = rng.next_u64();
            let mut cfg = GeneratorConfig::desk(mix.domain_for(i));
            cfg.camera = RenderCamera::desk(image_size);
            generate_identity(i as u32, s, &cfg)
        })
        .collect()
}

/// Corpus with planted defects: `janus` identities get one blurred frontal
/// render in a back view, `swaps` identities get a third of their non-frontal
/// views rendered from an impostor. Both sets are drawn from `seed`.
pub fn generate_corpus_with_defects(
    count: usize,
    seed: u64,
    mix: DataMix,
    image_size: usize,
    janus: usize,
    swaps: usize,
) -> Result<Vec<IdentityRecord>> {
    if janus > count || swaps > count {
        return Err(Error::invalid(format!("cannot plant {janus} janus / {swaps} swap defects in {count} identities")));
    }
    let mut pick = SeededRng::derive(seed, 0xdef);
    let mut order: Vec<usize> = (0..count).collect();
    for i in (1..count).rev() {
        order.swap(i, pick.below(i + 1));
    }
    let janus_ids: Vec<usize> = order[..janus].to_vec();
    let mut swap_order = order.clone();
    swap_order.reverse();
    let swap_ids: Vec<usize> = swap_order[..swaps].to_vec();
    let azimuths = identity_azimuths();
    let back: Vec<usize> = (0..azimuths.len()).filter(|&i| is_back_view(azimuths[i])).collect();
    let mut rng = SeededRng::derive(seed, 0xc0);
    (0..count)
        .map(|i| {
            let s = rng.next_u64();
            let mut cfg = GeneratorConfig::desk(mix.domain_for(i));
            cfg.camera = RenderCamera::desk(image_size);
            if janus_ids.contains(&i) {
                cfg.corruption.janus = vec![back[pick.below(back.len())]];
            }
            if swap_ids.contains(&i) {
                cfg.corruption.swap = (0..azimuths.len()).filter(|&v| azimuths[v] != 0.0 && v % 3 == 1).collect();
                cfg.corruption.swap.retain(|v| !cfg.corruption.janus.contains(v));
            }
            generate_identity(i as u32, s, &cfg)
        })
        .collect()
}

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestView {
    file: String,
    azimuth: f64,
    elevation: f64,
    planted: Option<Planted>,
    front_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestIdentity {
    id: u32,
    seed: u64,
    domain: Domain,
    appearance: Appearance,
    camera: RenderCamera,
    consistency: Option<f64>,
    views: Vec<ManifestView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    identities: Vec<ManifestIdentity>,
}

pub fn view_file_name(azimuth: f64) -> String {
    format!("view_{:+04}.png", azimuth.round() as i64)
}

pub fn identity_dir_name(id: u32) -> String {
    format!("id_{id:05}")
}

pub fn save_dataset(records: &[IdentityRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut identities = Vec::with_capacity(records.len());
    for r in records {
        let sub = identity_dir_name(r.id);
        fs::create_dir_all(dir.join(&sub))?;
        let mut views = Vec::with_capacity(r.views.len());
        for v in &r.views {
            let file = format!("{sub}/{}", view_file_name(v.azimuth));
            v.image.save(dir.join(&file))?;
            views.push(ManifestView {
                file,
                azimuth: v.azimuth,
                elevation: v.elevation,
                planted: v.planted,
                front_score: v.front_score,
            });
        }
        identities.push(ManifestIdentity {
            id: r.id,
            seed: r.seed,
            domain: r.domain,
            appearance: r.appearance,
            camera: r.camera,
            consistency: r.consistency,
            views,
        });
    }
    let manifest = Manifest { version: 1, identities };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<IdentityRecord>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
    let mut out = Vec::with_capacity(manifest.identities.len());
    for m in manifest.identities {
        let mut views = Vec::with_capacity(m.views.len());
        for v in m.views {
            let file: PathBuf = dir.join(&v.file);
            if !file.exists() {
                return Err(Error::MissingFile(file));
            }
            let image = image::open(&file)?.to_rgb8();
            let side = m.camera.image_size as u32;
            if image.dimensions() != (side, side) {
                return Err(Error::Manifest(format!(
                    "{} is {:?}, manifest says {side}x{side}",
                    file.display(),
                    image.dimensions()
                )));
            }
            views.push(ViewRecord {
                azimuth: v.azimuth,
                elevation: v.elevation,
                image,
                planted: v.planted,
                front_score: v.front_score,
            });
        }
        out.push(IdentityRecord {
            id: m.id,
            seed: m.seed,
            domain: m.domain,
            appearance: m.appearance,
            camera: m.camera,
            views,
            consistency: m.consistency,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(domain: Domain) -> GeneratorConfig {
        GeneratorConfig { camera: RenderCamera::desk(16), domain, corruption: Corruption::default() }
    }

    #[test]
    fn azimuths_are_uniform_over_the_circle() {
        let az = identity_azimuths();
        assert_eq!(az.len(), 24);
        assert_eq!(az[0], -180.0);
        for w in az.windows(2) {
            assert!((w[1] - w[0] - 15.0).abs() < 1e-12);
        }
        assert_eq!(view_file_name(-15.0), "view_-015.png");
        assert_eq!(view_file_name(0.0), "view_+000.png");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_identity(3, 99, &small(Domain::RealProxy)).unwrap();
        let b = generate_identity(3, 99, &small(Domain::RealProxy)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.views.len(), 24);
        assert_ne!(a, generate_identity(3, 100, &small(Domain::RealProxy)).unwrap());
    }

    #[test]
    fn planted_defects_hit_exactly_the_configured_views() {
        let mut cfg = small(Domain::SyntheticProxy);
        cfg.corruption = Corruption { janus: vec![0, 23], swap: vec![5, 6] };
        let r = generate_identity(1, 7, &cfg).unwrap();
        let clean = generate_identity(1, 7, &small(Domain::SyntheticProxy)).unwrap();
        let front = render::blur(&clean.view_at(0.0).unwrap().image, 1.5);
        for (i, v) in r.views.iter().enumerate() {
            match i {
                0 | 23 => {
                    assert_eq!(v.planted, Some(Planted::Janus));
                    assert_eq!(v.image, front);
                }
                5 | 6 => {
                    assert_eq!(v.planted, Some(Planted::Swap));
                    assert_ne!(v.image, clean.views[i].image);
                }
                _ => assert_eq!(v, &clean.views[i]),
            }
        }
        cfg.corruption = Corruption { janus: vec![12], swap: vec![] };
        assert!(generate_identity(1, 7, &cfg).is_err());
    }

    #[test]
    fn dataset_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = generate_corpus(2, 5, DataMix::Both, 16).unwrap();
        records[1].consistency = Some(0.5);
        records[0].views[3].front_score = Some(0.25);
        save_dataset(&records, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, records);
        assert_eq!(back[1].domain, Domain::SyntheticProxy);

        let victim = dir.path().join(identity_dir_name(1)).join(view_file_name(-90.0));
        fs::remove_file(&victim).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::MissingFile(p)) => assert_eq!(p, victim),
            other => panic!("expected missing file, got {other:?}"),
        }
    }
}
