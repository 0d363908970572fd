//! Evaluation metrics over generated and reference views.

use std::collections::BTreeMap;

use image::RgbImage;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::backends::{cosine, Embedder, RandomConvEmbedder};
use crate::error::{Error, Result};

/// Gaussian moments of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

const NEG_EIG_TOLERANCE: f64 = 1e-6;

impl FeatureStats {
    /// Sample mean and unbiased covariance; needs at least two samples.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        if features.len() < 2 {
            return Err(Error::invalid(format!("need at least 2 samples, got {}", features.len())));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::invalid("feature vectors differ in length"));
        }
        let n = features.len();
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let covariance = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok(Self { mean, covariance, count: n })
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.covariance;
        if c.nrows() != self.mean.len() || c.ncols() != self.mean.len() {
            return Err(Error::shape(self.mean.len(), (c.nrows(), c.ncols())));
        }
        if (c - c.transpose()).abs().max() > 1e-9 {
            return Err(Error::invalid("covariance is not symmetric"));
        }
        let min = c.clone().symmetric_eigen().eigenvalues.min();
        if min < -1e-9 {
            return Err(Error::NotPsd(min));
        }
        Ok(())
    }
}

/// Eigenvalues of a symmetric matrix, negatives within tolerance clipped to zero.
fn clipped_eigen(m: DMatrix<f64>) -> Result<nalgebra::SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut e = m.symmetric_eigen();
    for v in e.eigenvalues.iter_mut() {
        if *v < -NEG_EIG_TOLERANCE {
            return Err(Error::NotPsd(*v));
        }
        *v = v.max(0.0);
    }
    Ok(e)
}

/// Frechet distance between two Gaussians.
///
/// `tr((Sa Sb)^(1/2))` is evaluated as `tr((Sa^(1/2) Sb Sa^(1/2))^(1/2))`,
/// whose argument is symmetric PSD.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::shape(a.mean.len(), b.mean.len()));
    }
    a.validate()?;
    b.validate()?;
    let ea = clipped_eigen(a.covariance.clone())?;
    let root_a = &ea.eigenvectors * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt)) * ea.eigenvectors.transpose();
    let mid = &root_a * &b.covariance * &root_a;
    let mid = (&mid + mid.transpose()) * 0.5;
    let cross: f64 = clipped_eigen(mid)?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let diff = &a.mean - &b.mean;
    let value = diff.dot(&diff) + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Mean cosine similarity of `input` against each of `views`.
pub fn mean_similarity_to(input: &[f64], views: &[Vec<f64>]) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::invalid("no views to compare"));
    }
    Ok(views.iter().map(|v| cosine(input, v)).sum::<f64>() / views.len() as f64)
}

/// Mean cosine similarity over all unordered pairs.
pub fn mean_pairwise(views: &[Vec<f64>]) -> Result<f64> {
    crate::data::prune::mean_pairwise_similarity(views)
        .ok_or_else(|| Error::invalid(format!("need at least 2 views, got {}", views.len())))
}

pub fn embed_similarity(input: &RgbImage, views: &[RgbImage], emb: &dyn Embedder) -> Result<f64> {
    let views: Vec<_> = views.iter().map(|v| emb.embed(v)).collect();
    mean_similarity_to(&emb.embed(input), &views)
}

/// Input-to-output identity consistency under a face embedder.
pub fn i2oid(input: &RgbImage, views: &[RgbImage], face: &dyn Embedder) -> Result<f64> {
    embed_similarity(input, views, face)
}

/// Output-to-output identity consistency under a face embedder.
pub fn o2oid(views: &[RgbImage], face: &dyn Embedder) -> Result<f64> {
    mean_pairwise(&views.iter().map(|v| face.embed(v)).collect::<Vec<_>>())
}

pub const REID_THRESHOLD: f64 = 0.6;

/// Fraction of aligned pairs closer than `threshold` (strictly) and the mean distance.
pub fn reid_from_embeddings(generated: &[Vec<f64>], reference: &[Vec<f64>], threshold: f64) -> Result<(f64, f64)> {
    if generated.len() != reference.len() || generated.is_empty() {
        return Err(Error::shape(reference.len(), generated.len()));
    }
    let dists: Vec<f64> = generated
        .iter()
        .zip(reference)
        .map(|(g, r)| g.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .collect();
    let n = dists.len() as f64;
    let matched = dists.iter().filter(|&&d| d < threshold).count() as f64;
    Ok((matched / n, dists.iter().sum::<f64>() / n))
}

pub fn reid(generated: &[RgbImage], reference: &[RgbImage], face: &dyn Embedder, threshold: f64) -> Result<(f64, f64)> {
    let g: Vec<_> = generated.iter().map(|v| face.embed(v)).collect();
    let r: Vec<_> = reference.iter().map(|v| face.embed(v)).collect();
    reid_from_embeddings(&g, &r, threshold)
}

pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over every 8x8 window of single-channel `[0, 1]` images in row-major order.
pub fn ssim_channel(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != width * height {
        return Err(Error::shape(width * height, (a.len(), b.len())));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::invalid(format!("image {width}x{height} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for y in 0..=height - SSIM_WINDOW {
        for x in 0..=width - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let i = (y + dy) * width + x + dx;
                    sa += a[i];
                    sb += b[i];
                    saa += a[i] * a[i];
                    sbb += b[i] * b[i];
                    sab += a[i] * b[i];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// SSIM averaged over the RGB channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::shape(a.dimensions(), b.dimensions()));
    }
    let (w, h) = (a.width() as usize, a.height() as usize);
    let chan = |img: &RgbImage, c: usize| img.pixels().map(|p| p.0[c] as f64 / 255.0).collect::<Vec<_>>();
    let mut acc = 0.0;
    for c in 0..3 {
        acc += ssim_channel(&chan(a, c), &chan(b, c), w, h)?;
    }
    Ok(acc / 3.0)
}

/// Feature extractors behind the metric suite.
pub struct MetricBackends {
    /// Stand-in for the image-text embedding used by the similarity metric.
    pub clip: Box<dyn Embedder>,
    pub face: Box<dyn Embedder>,
    pub features: Box<dyn Embedder>,
}

impl MetricBackends {
    /// Frozen random projectors with fixed seeds.
    pub fn desk() -> Self {
        Self {
            clip: Box::new(RandomConvEmbedder::new(101, 64)),
            face: Box::new(RandomConvEmbedder::new(202, 64)),
            features: Box::new(RandomConvEmbedder::new(303, 32)),
        }
    }
}

/// One identity to evaluate; `reference` views are aligned with `generated`.
#[derive(Debug, Clone)]
pub struct EvalIdentity {
    pub id: u32,
    pub input: RgbImage,
    pub generated: Vec<RgbImage>,
    pub reference: Option<Vec<RgbImage>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityMetrics {
    pub id: u32,
    pub clip_sim: f64,
    pub i2oid: f64,
    pub o2oid: Option<f64>,
    pub reid_match: Option<f64>,
    pub reid_dist: Option<f64>,
    pub ssim_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: Option<f64>,
    pub clip_sim: f64,
    pub i2oid: f64,
    pub o2oid: Option<f64>,
    pub reid_match: Option<f64>,
    pub reid_dist: Option<f64>,
    pub ssim_mean: Option<f64>,
    pub per_identity: Vec<IdentityMetrics>,
    pub provenance: BTreeMap<String, String>,
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.collect::<Option<Vec<_>>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Full metric suite. FID compares generated views against references when
/// every identity has them, otherwise against the input images.
pub fn evaluate(identities: &[EvalIdentity], backends: &MetricBackends) -> Result<MetricReport> {
    if identities.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let mut per = Vec::with_capacity(identities.len());
    for ident in identities {
        let (reid_match, reid_dist, ssim_mean) = match &ident.reference {
            Some(r) => {
                let (m, d) = reid(&ident.generated, r, backends.face.as_ref(), REID_THRESHOLD)?;
                let s = ident.generated.iter().zip(r).map(|(g, r)| ssim(g, r)).collect::<Result<Vec<_>>>()?;
                (Some(m), Some(d), Some(s.iter().sum::<f64>() / s.len() as f64))
            }
            None => (None, None, None),
        };
        per.push(IdentityMetrics {
            id: ident.id,
            clip_sim: embed_similarity(&ident.input, &ident.generated, backends.clip.as_ref())?,
            i2oid: i2oid(&ident.input, &ident.generated, backends.face.as_ref())?,
            o2oid: (ident.generated.len() >= 2).then(|| o2oid(&ident.generated, backends.face.as_ref())).transpose()?,
            reid_match,
            reid_dist,
            ssim_mean,
        });
    }
    let feats = |imgs: Vec<&RgbImage>| imgs.into_iter().map(|i| backends.features.embed(i)).collect::<Vec<_>>();
    let generated = feats(identities.iter().flat_map(|i| &i.generated).collect());
    let baseline = if identities.iter().all(|i| i.reference.is_some()) {
        feats(identities.iter().flat_map(|i| i.reference.as_ref().unwrap()).collect())
    } else {
        feats(identities.iter().map(|i| &i.input).collect())
    };
    let fid_value = if generated.len() >= 2 && baseline.len() >= 2 {
        Some(fid(&FeatureStats::from_features(&baseline)?, &FeatureStats::from_features(&generated)?)?)
    } else {
        None
    };
    let n = per.len() as f64;
    let mut provenance = BTreeMap::new();
    provenance.insert("clip_backend".into(), backends.clip.name().into());
    provenance.insert("face_backend".into(), backends.face.name().into());
    provenance.insert("feature_backend".into(), backends.features.name().into());
    provenance.insert("identities".into(), identities.len().to_string());
    Ok(MetricReport {
        fid: fid_value,
        clip_sim: per.iter().map(|p| p.clip_sim).sum::<f64>() / n,
        i2oid: per.iter().map(|p| p.i2oid).sum::<f64>() / n,
        o2oid: mean_of(per.iter().map(|p| p.o2oid)),
        reid_match: mean_of(per.iter().map(|p| p.reid_match)),
        reid_dist: mean_of(per.iter().map(|p| p.reid_dist)),
        ssim_mean: mean_of(per.iter().map(|p| p.ssim_mean)),
        per_identity: per,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn stats_1d(mean: f64, var: f64) -> FeatureStats {
        FeatureStats { mean: DVector::from_vec(vec![mean]), covariance: DMatrix::from_vec(1, 1, vec![var]), count: 10 }
    }

    fn random_features(rng: &mut SeededRng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|j| rng.normal() * (1.0 + j as f64 * 0.3) + shift).collect()).collect()
    }

    #[test]
    fn fid_closed_forms_and_symmetry() {
        assert_eq!(fid(&stats_1d(0.0, 1.0), &stats_1d(1.0, 1.0)).unwrap(), 1.0);
        let mut rng = SeededRng::new(0);
        let a = FeatureStats::from_features(&random_features(&mut rng, 40, 5, 0.0)).unwrap();
        let b = FeatureStats::from_features(&random_features(&mut rng, 30, 5, 0.5)).unwrap();
        assert!(fid(&a, &a).unwrap().abs() < 1e-8);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-9);
        assert!(fid(&a, &stats_1d(0.0, 1.0)).is_err());
    }

    #[test]
    fn fid_rejects_non_psd() {
        let bad = stats_1d(0.0, -0.5);
        assert!(matches!(fid(&bad, &stats_1d(0.0, 1.0)), Err(Error::NotPsd(_))));
    }

    #[test]
    fn covariance_is_unbiased() {
        let s = FeatureStats::from_features(&[vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(s.covariance[(0, 0)], 2.0);
        assert!(FeatureStats::from_features(&[vec![1.0]]).is_err());
    }

    #[test]
    fn similarity_means() {
        let input = vec![1.0, 0.0];
        let views = vec![vec![0.8, 0.6], vec![0.6, 0.8]];
        assert!((mean_similarity_to(&input, &views).unwrap() - 0.7).abs() < 1e-12);
        assert!(mean_similarity_to(&input, &[]).is_err());
        assert_eq!(mean_pairwise(&views).unwrap(), 0.8 * 0.6 * 2.0);
        assert!(mean_pairwise(&views[..1]).is_err());
    }

    #[test]
    fn reid_strict_threshold() {
        let z = vec![0.0, 0.0];
        let (m, d) = reid_from_embeddings(&[vec![0.5, 0.0], vec![0.7, 0.0]], &[z.clone(), z.clone()], 0.6).unwrap();
        assert_eq!(m, 0.5);
        assert!((d - 0.6).abs() < 1e-12);
        let (m, _) = reid_from_embeddings(&[vec![0.6, 0.0]], &[z.clone()], 0.6).unwrap();
        assert_eq!(m, 0.0);
        assert!(reid_from_embeddings(&[z.clone()], &[], 0.6).is_err());
    }

    #[test]
    fn ssim_identity_and_constant_closed_form() {
        let mut rng = SeededRng::new(4);
        let a: Vec<f64> = (0..144).map(|_| rng.uniform()).collect();
        assert!((ssim_channel(&a, &a, 12, 12).unwrap() - 1.0).abs() < 1e-9);
        let c5 = vec![0.5; 100];
        let c7 = vec![0.7; 100];
        let want = (2.0 * 0.5 * 0.7 + SSIM_C1) / (0.25 + 0.49 + SSIM_C1);
        assert!((ssim_channel(&c5, &c7, 10, 10).unwrap() - want).abs() < 1e-12);
        let b: Vec<f64> = a.iter().map(|x| 1.0 - x).collect();
        let s = ssim_channel(&a, &b, 12, 12).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert!(ssim_channel(&a, &a[..100], 10, 10).is_err());
    }
}
