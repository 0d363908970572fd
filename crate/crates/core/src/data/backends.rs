//! Scorer and embedder backends used by pruning and evaluation.

use std::collections::HashMap;

use image::{imageops::FilterType, RgbImage};
use sha2::{Digest, Sha256};

use crate::rng::SeededRng;

/// Maps an image to a unit-norm vector, deterministically.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn embed(&self, image: &RgbImage) -> Vec<f64>;
}

/// Scores how much an image looks like a front face, in `[0, 1]`.
pub trait BackViewClassifier: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, image: &RgbImage) -> f64;
}

/// Content key of an image: SHA-256 over its size and pixels.
pub fn image_key(image: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    hex::encode(h.finalize())
}

pub fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-300 {
        v.iter_mut().for_each(|x| *x = 0.0);
        if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
        return v;
    }
    v.iter_mut().for_each(|x| *x /= n);
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns planted scores by image content; unknown images get `default`.
#[derive(Debug, Clone, Default)]
pub struct LookupClassifier {
    scores: HashMap<String, f64>,
    pub default: f64,
}

impl LookupClassifier {
    pub fn new(default: f64) -> Self {
        Self { scores: HashMap::new(), default }
    }

    pub fn insert(&mut self, image: &RgbImage, score: f64) {
        self.scores.insert(image_key(image), score.clamp(0.0, 1.0));
    }
}

impl BackViewClassifier for LookupClassifier {
    fn name(&self) -> &str {
        "lookup"
    }

    fn score(&self, image: &RgbImage) -> f64 {
        self.scores.get(&image_key(image)).copied().unwrap_or(self.default)
    }
}

/// Returns planted embeddings by image content, falling back to another embedder.
pub struct LookupEmbedder {
    vectors: HashMap<String, Vec<f64>>,
    fallback: Box<dyn Embedder>,
}

impl LookupEmbedder {
    pub fn new(fallback: Box<dyn Embedder>) -> Self {
        Self { vectors: HashMap::new(), fallback }
    }

    pub fn insert(&mut self, image: &RgbImage, vector: Vec<f64>) {
        self.vectors.insert(image_key(image), unit(vector));
    }
}

impl Embedder for LookupEmbedder {
    fn name(&self) -> &str {
        "lookup"
    }

    fn embed(&self, image: &RgbImage) -> Vec<f64> {
        match self.vectors.get(&image_key(image)) {
            Some(v) => v.clone(),
            None => self.fallback.embed(image),
        }
    }
}

struct ConvLayer {
    weight: Vec<f64>,
    input: usize,
    output: usize,
    kernel: usize,
    stride: usize,
}

impl ConvLayer {
    fn new(rng: &mut SeededRng, input: usize, output: usize, kernel: usize, stride: usize) -> Self {
        let std = 1.5 / ((input * kernel * kernel) as f64).sqrt();
        let weight = rng.normals(output * input * kernel * kernel).into_iter().map(|x| x * std).collect();
        Self { weight, input, output, kernel, stride }
    }

    /// Valid convolution followed by `tanh`, on `(C, side, side)` data.
    fn forward(&self, x: &[f64], side: usize) -> (Vec<f64>, usize) {
        let out_side = (side - self.kernel) / self.stride + 1;
        let k = self.kernel;
        let mut out = vec![0.0; self.output * out_side * out_side];
        for o in 0..self.output {
            for i in 0..out_side {
                for j in 0..out_side {
                    let mut acc = 0.0;
                    for c in 0..self.input {
                        for a in 0..k {
                            for b in 0..k {
                                let w = self.weight[((o * self.input + c) * k + a) * k + b];
                                acc += w * x[(c * side + i * self.stride + a) * side + j * self.stride + b];
                            }
                        }
                    }
                    out[(o * out_side + i) * out_side + j] = acc.tanh();
                }
            }
        }
        (out, out_side)
    }
}

/// Frozen random convolutional projector.
///
/// Two bias-free `tanh` conv layers, 2x2 region pooling and a random linear
/// map. The odd, bias-free stack sends sign-symmetric noise to zero-mean
/// features, so unrelated noise images embed in unrelated directions.
pub struct RandomConvEmbedder {
    conv1: ConvLayer,
    conv2: ConvLayer,
    projection: Vec<f64>,
    dim: usize,
    features: usize,
}

impl RandomConvEmbedder {
    pub const INPUT: usize = 32;

    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = SeededRng::derive(seed, 0xe3b);
        let conv1 = ConvLayer::new(&mut rng, 3, 8, 5, 2);
        let conv2 = ConvLayer::new(&mut rng, 8, 16, 3, 2);
        let features = 16 * 3 * 3;
        let std = 1.0 / (features as f64).sqrt();
        let projection = rng.normals(dim * features).into_iter().map(|x| x * std).collect();
        Self { conv1, conv2, projection, dim, features }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl Embedder for RandomConvEmbedder {
    fn name(&self) -> &str {
        "random-conv"
    }

    fn embed(&self, image: &RgbImage) -> Vec<f64> {
        let s = Self::INPUT;
        let img = if image.dimensions() == (s as u32, s as u32) {
            image.clone()
        } else {
            image::imageops::resize(image, s as u32, s as u32, FilterType::Triangle)
        };
        let mut x = vec![0.0; 3 * s * s];
        for (px, py, p) in img.enumerate_pixels() {
            for c in 0..3 {
                x[(c * s + py as usize) * s + px as usize] = p.0[c] as f64 / 127.5 - 1.0;
            }
        }
        let (h1, s1) = self.conv1.forward(&x, s);
        let (h2, s2) = self.conv2.forward(&h1, s1);
        // 6x6 maps pooled to 3x3.
        let cells = 3;
        let cell = s2 / cells;
        let mut pooled = vec![0.0; self.features];
        for c in 0..16 {
            for i in 0..s2 {
                for j in 0..s2 {
                    let slot = (c * cells + (i / cell).min(cells - 1)) * cells + (j / cell).min(cells - 1);
                    pooled[slot] += h2[(c * s2 + i) * s2 + j] / (cell * cell) as f64;
                }
            }
        }
        let out = (0..self.dim)
            .map(|d| (0..self.features).map(|f| self.projection[d * self.features + f] * pooled[f]).sum())
            .collect();
        unit(out)
    }
}

/// Two-prototype classifier: softmax over scaled cosine similarity to a
/// front-face and a back-of-head prototype embedding.
pub struct TemplateClassifier {
    embedder: Box<dyn Embedder>,
    front: Vec<f64>,
    back: Vec<f64>,
    pub temperature: f64,
}

impl TemplateClassifier {
    pub fn from_examples(embedder: Box<dyn Embedder>, fronts: &[RgbImage], backs: &[RgbImage]) -> Self {
        let mean = |imgs: &[RgbImage]| {
            let mut acc: Vec<f64> = Vec::new();
            for img in imgs {
                let e = embedder.embed(img);
                if acc.is_empty() {
                    acc = vec![0.0; e.len()];
                }
                acc.iter_mut().zip(&e).for_each(|(a, x)| *a += x);
            }
            unit(acc)
        };
        let front = mean(fronts);
        let back = mean(backs);
        Self { embedder, front, back, temperature: 10.0 }
    }
}

impl BackViewClassifier for TemplateClassifier {
    fn name(&self) -> &str {
        "template"
    }

    fn score(&self, image: &RgbImage) -> f64 {
        let e = self.embedder.embed(image);
        let f = self.temperature * cosine(&e, &self.front);
        let b = self.temperature * cosine(&e, &self.back);
        let m = f.max(b);
        let (ef, eb) = ((f - m).exp(), (b - m).exp());
        ef / (ef + eb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn noise_image(seed: u64) -> RgbImage {
        let mut rng = SeededRng::new(seed);
        RgbImage::from_fn(32, 32, |_, _| {
            Rgb([0, 1, 2].map(|_| ((rng.normal().clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8))
        })
    }

    #[test]
    fn random_conv_embeddings_are_unit_and_deterministic() {
        let e = RandomConvEmbedder::new(0, 48);
        let img = noise_image(1);
        let a = e.embed(&img);
        assert_eq!(a.len(), 48);
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(a, e.embed(&img));
        let big = image::imageops::resize(&img, 64, 64, FilterType::Nearest);
        assert_eq!(e.embed(&big).len(), 48);
    }

    #[test]
    fn lookups_return_planted_values() {
        let img = noise_image(2);
        let mut clf = LookupClassifier::new(0.1);
        clf.insert(&img, 0.95);
        assert_eq!(clf.score(&img), 0.95);
        assert_eq!(clf.score(&noise_image(3)), 0.1);

        let mut emb = LookupEmbedder::new(Box::new(RandomConvEmbedder::new(0, 8)));
        emb.insert(&img, vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(emb.embed(&img)[..2], [0.6, 0.8]);
    }

    #[test]
    fn template_classifier_prefers_matching_prototype() {
        let fronts = vec![noise_image(10), noise_image(11)];
        let backs = vec![RgbImage::from_pixel(32, 32, Rgb([200, 40, 40]))];
        let clf = TemplateClassifier::from_examples(Box::new(RandomConvEmbedder::new(0, 32)), &fronts, &backs);
        let s_back = clf.score(&backs[0]);
        assert!((0.0..=1.0).contains(&s_back));
        assert!(s_back < 0.5);
    }

    #[test]
    fn zero_vector_maps_to_a_unit_vector() {
        assert_eq!(unit(vec![0.0, 0.0]), vec![1.0, 0.0]);
    }
}
