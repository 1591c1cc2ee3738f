//! Dataset diversity as the mean pairwise cosine distance of features.
//!
//! For `n` vectors the score is `1/(n²-n) · Σ_{i≠j} (1 - cos(v_i, v_j))`.
//! It is computed in linear time: with unit vectors `u_i` and `S = Σ u_i`,
//! `Σ_{i≠j} cos = |S|² - Σ |u_i|²`.

use std::path::Path;

use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetShard;
use crate::seed;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiversityError {
    #[error("need at least 2 vectors, got {0}")]
    TooFewVectors(usize),
    #[error("vector {index} has length {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("feature vector is empty")]
    EmptyVector,
    #[error("feature vector has zero norm")]
    ZeroNorm,
    #[error("feature vector contains a non-finite value")]
    NonFinite,
    #[error("shard has {0} records, need at least 2")]
    TooFewRecords(usize),
    #[error("embedding provider: {0}")]
    Embed(#[from] EmbedError),
    #[error("record {id}: {message}")]
    Image { id: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
    norm: f64,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self, DiversityError> {
        if values.is_empty() {
            return Err(DiversityError::EmptyVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DiversityError::NonFinite);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(DiversityError::ZeroNorm);
        }
        Ok(Self { values, norm })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Mean cosine distance over ordered pairs of distinct indices, in [0, 2].
pub fn mean_pairwise_cosine_distance(vectors: &[FeatureVector]) -> Result<f64, DiversityError> {
    let n = vectors.len();
    if n < 2 {
        return Err(DiversityError::TooFewVectors(n));
    }
    let dim = vectors[0].len();
    if let Some((index, v)) = vectors.iter().enumerate().find(|(_, v)| v.len() != dim) {
        return Err(DiversityError::DimensionMismatch {
            index,
            expected: dim,
            found: v.len(),
        });
    }
    let mut sum = vec![0.0f64; dim];
    let mut self_dots = 0.0f64;
    for v in vectors {
        let mut sq = 0.0;
        for (s, x) in sum.iter_mut().zip(&v.values) {
            let u = x / v.norm;
            *s += u;
            sq += u * u;
        }
        self_dots += sq;
    }
    let total: f64 = sum.iter().map(|s| s * s).sum();
    let pairs = (n * n - n) as f64;
    let mean_cos = (total - self_dots) / pairs;
    Ok((1.0 - mean_cos).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbedError {
    #[error("embedder unavailable: {0}")]
    Unavailable(String),
    #[error("invalid embedding: {0}")]
    Invalid(String),
}

pub trait EmbedProvider: Send + Sync {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>, EmbedError>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
}

/// Deterministic stand-in embedder. Images map to the mean color of a 4x4
/// grid plus a constant component; text maps to hashed word counts.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockEmbedder;

const TEXT_DIM: usize = 256;

impl EmbedProvider for MockEmbedder {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>, EmbedError> {
        let (w, h) = image.dimensions();
        if w == 0 || h == 0 {
            return Err(EmbedError::Invalid("empty image".into()));
        }
        let mut feats = vec![0.0f64; 4 * 4 * 3];
        let mut counts = [0u64; 16];
        for (x, y, p) in image.enumerate_pixels() {
            let cell = ((y as u64 * 4 / h as u64) * 4 + x as u64 * 4 / w as u64) as usize;
            counts[cell] += 1;
            for c in 0..3 {
                feats[cell * 3 + c] += f64::from(p.0[c]) / 255.0;
            }
        }
        for (cell, n) in counts.iter().enumerate() {
            for c in 0..3 {
                feats[cell * 3 + c] /= (*n).max(1) as f64;
            }
        }
        feats.push(1.0);
        Ok(feats)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let mut feats = vec![0.0f64; TEXT_DIM];
        for word in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            let digest = seed::sha256_hex(word.to_lowercase().as_bytes());
            let bucket = usize::from_str_radix(&digest[..8], 16).unwrap_or(0) % TEXT_DIM;
            feats[bucket] += 1.0;
        }
        Ok(feats)
    }
}

/// Embedder behind an HTTP endpoint. It receives
/// `{"kind": "image" | "text", "data": <base64 PNG | text>}` and answers
/// `{"embedding": [..]}`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    pub url: String,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>) -> Self {
        Self { url: url.into() }
    }

    fn post(&self, kind: &str, data: String) -> Result<Vec<f64>, EmbedError> {
        let resp = ureq::post(&self.url)
            .timeout(std::time::Duration::from_secs(120))
            .send_json(serde_json::json!({ "kind": kind, "data": data }))
            .map_err(|e| EmbedError::Unavailable(e.to_string()))?;
        let body: serde_json::Value = resp
            .into_json()
            .map_err(|e| EmbedError::Invalid(e.to_string()))?;
        body.get("embedding")
            .and_then(|e| e.as_array())
            .ok_or_else(|| EmbedError::Invalid("response has no `embedding` array".into()))?
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| EmbedError::Invalid("non-numeric component".into()))
            })
            .collect()
    }
}

impl EmbedProvider for HttpEmbedder {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>, EmbedError> {
        let mut png = Vec::new();
        image
            .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| EmbedError::Invalid(e.to_string()))?;
        self.post(
            "image",
            base64::engine::general_purpose::STANDARD.encode(png),
        )
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        self.post("text", text.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub image_diversity: f64,
    pub text_diversity: f64,
    pub n: usize,
    pub sample_seed: u64,
    /// Ids of the sampled records, sorted.
    pub sampled_ids: Vec<String>,
}

/// Samples `min(sample_size, n)` records uniformly with `seed` and scores
/// image features and concatenated question/answer text.
pub fn compute_report(
    shard: &DatasetShard,
    embedder: &dyn EmbedProvider,
    sample_size: usize,
    seed: u64,
) -> Result<DiversityReport, DiversityError> {
    let n = shard.records.len();
    if n < 2 {
        return Err(DiversityError::TooFewRecords(n));
    }
    let k = sample_size.clamp(2, n);
    let mut rng = seed::rng(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    let mut image_feats = Vec::with_capacity(k);
    let mut text_feats = Vec::with_capacity(k);
    for &i in &picked {
        let r = &shard.records[i];
        let img = load_rgb(&shard.image_path(r)).map_err(|message| DiversityError::Image {
            id: r.id.clone(),
            message,
        })?;
        image_feats.push(FeatureVector::new(embedder.embed_image(&img)?)?);
        text_feats.push(FeatureVector::new(embedder.embed_text(&r.qa_text())?)?);
    }
    Ok(DiversityReport {
        image_diversity: mean_pairwise_cosine_distance(&image_feats)?,
        text_diversity: mean_pairwise_cosine_distance(&text_feats)?,
        n: k,
        sample_seed: seed,
        sampled_ids: picked
            .iter()
            .map(|&i| shard.records[i].id.clone())
            .collect(),
    })
}

fn load_rgb(path: &Path) -> Result<RgbImage, String> {
    crate::render::RenderedImage::open(path)?.rgb()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Direct transcription of the definition, used as the oracle.
    fn naive(vs: &[Vec<f64>]) -> f64 {
        let n = vs.len();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let dot: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
                let ni = vs[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                let nj = vs[j].iter().map(|a| a * a).sum::<f64>().sqrt();
                total += 1.0 - dot / (ni * nj);
            }
        }
        total / (n * n - n) as f64
    }

    fn fv(vs: &[Vec<f64>]) -> Vec<FeatureVector> {
        vs.iter()
            .map(|v| FeatureVector::new(v.clone()).unwrap())
            .collect()
    }

    #[test]
    fn identical_vectors_score_zero() {
        let v = vec![vec![0.3, -1.2, 4.0]; 7];
        assert!(mean_pairwise_cosine_distance(&fv(&v)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn orthogonal_pair_scores_one() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((mean_pairwise_cosine_distance(&fv(&v)).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn opposite_pair_scores_two() {
        let v = vec![vec![1.0, 2.0], vec![-1.0, -2.0]];
        assert!((mean_pairwise_cosine_distance(&fv(&v)).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ten_random_unit_vectors_match_oracle() {
        let mut rng = seed::rng(42);
        let vs: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let fast = mean_pairwise_cosine_distance(&fv(&vs)).unwrap();
        assert!((fast - naive(&vs)).abs() < 1e-12);
    }

    #[test]
    fn duplicating_an_outlier_can_increase() {
        let a = vec![1.0, 0.0];
        let b = vec![-1.0, 0.0];
        let base = vec![a.clone(), a.clone(), a, b.clone()];
        let before = mean_pairwise_cosine_distance(&fv(&base)).unwrap();
        let mut more = base;
        more.push(b);
        let after = mean_pairwise_cosine_distance(&fv(&more)).unwrap();
        assert!((before - 1.0).abs() < 1e-12);
        assert!((after - 1.2).abs() < 1e-12);
    }

    #[test]
    fn input_errors() {
        assert_eq!(
            FeatureVector::new(vec![0.0, 0.0]),
            Err(DiversityError::ZeroNorm)
        );
        assert_eq!(FeatureVector::new(vec![]), Err(DiversityError::EmptyVector));
        assert_eq!(
            FeatureVector::new(vec![f64::NAN]),
            Err(DiversityError::NonFinite)
        );
        assert_eq!(
            mean_pairwise_cosine_distance(&fv(&[vec![1.0]])),
            Err(DiversityError::TooFewVectors(1))
        );
        assert!(matches!(
            mean_pairwise_cosine_distance(&fv(&[vec![1.0], vec![1.0, 2.0]])),
            Err(DiversityError::DimensionMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn mock_embedder_is_deterministic() {
        let img = RgbImage::from_fn(37, 23, |x, y| image::Rgb([x as u8, y as u8, 7]));
        let e = MockEmbedder;
        assert_eq!(e.embed_image(&img).unwrap(), e.embed_image(&img).unwrap());
        assert_eq!(
            e.embed_text("a b c").unwrap(),
            e.embed_text("A b c").unwrap()
        );
        assert_eq!(e.embed_image(&img).unwrap().len(), 49);
    }

    fn vecs() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..24, 1usize..16).prop_flat_map(|(n, d)| {
            prop::collection::vec(
                prop::collection::vec(-10.0f64..10.0, d)
                    .prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3)),
                n,
            )
        })
    }

    proptest! {
        #[test]
        fn matches_oracle(vs in vecs()) {
            let fast = mean_pairwise_cosine_distance(&fv(&vs)).unwrap();
            prop_assert!((fast - naive(&vs)).abs() < 1e-12);
            prop_assert!((0.0..=2.0).contains(&fast));
        }

        #[test]
        fn permutation_invariant(vs in vecs(), rot in 0usize..100) {
            let mut p = vs.clone();
            let k = rot % p.len();
            p.rotate_left(k);
            p.reverse();
            let a = mean_pairwise_cosine_distance(&fv(&vs)).unwrap();
            let b = mean_pairwise_cosine_distance(&fv(&p)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn duplicating_a_central_vector_never_increases(vs in vecs()) {
            // Duplicating v_k keeps the score from rising iff its summed
            // distance to the others is at most n times the score; the most
            // central vector always qualifies.
            let f = fv(&vs);
            let before = mean_pairwise_cosine_distance(&f).unwrap();
            let row = |k: usize| -> f64 {
                (0..vs.len())
                    .filter(|&i| i != k)
                    .map(|i| naive(&[vs[i].clone(), vs[k].clone()]))
                    .sum()
            };
            let k = (0..vs.len()).min_by(|&a, &b| row(a).total_cmp(&row(b))).unwrap();
            let mut more = vs.clone();
            more.push(vs[k].clone());
            let after = mean_pairwise_cosine_distance(&fv(&more)).unwrap();
            prop_assert!(after <= before + 1e-12);
        }

        #[test]
        fn positive_multiples_score_zero(v in prop::collection::vec(-5.0f64..5.0, 1..10), ks in prop::collection::vec(0.1f64..100.0, 2..10)) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
            let vs: Vec<Vec<f64>> = ks.iter().map(|k| v.iter().map(|x| x * k).collect()).collect();
            prop_assert!(mean_pairwise_cosine_distance(&fv(&vs)).unwrap() < 1e-12);
        }
    }
}
