//! Embedding providers.
//!
//! The curation pipeline only needs unit-norm image and text embeddings
//! from *some* encoder. Two implementations ship here: a seeded random
//! projection of pixels (self-contained, used by the desk rig and tests;
//! descriptions that name a known synthetic pattern are grounded by
//! rendering canonical exemplars and embedding those), and a file-backed
//! provider that serves precomputed embeddings from any external encoder,
//! keyed by image content hash.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::synth;

pub trait EmbeddingProvider: Sync {
    fn dim(&self) -> usize;
    fn embed_image(&self, img: &Image) -> Result<Vec<f32>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
}

pub fn l2_normalize(v: &mut [f32]) -> Result<()> {
    let norm: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::Precondition("cannot normalize zero vector".into()));
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    Ok(())
}

fn fnv1a(text: &str) -> u64 {
    let mut acc: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        acc ^= *b as u64;
        acc = acc.wrapping_mul(0x100000001b3);
    }
    acc
}

/// Fixed seeded linear map of flattened pixels (plus a constant lane so no
/// input maps to the zero vector), L2-normalized.
pub struct ProjectionProvider {
    dim: usize,
    input_shape: (usize, usize, usize),
    weights: Array2<f32>, // dim x (C*H*W + 1)
    text_renders: usize,
}

impl ProjectionProvider {
    pub fn new(input_shape: (usize, usize, usize), dim: usize, seed: u64) -> Self {
        let (c, h, w) = input_shape;
        let n_in = c * h * w + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (1.0 / n_in as f32).sqrt();
        let weights =
            Array2::from_shape_fn((dim, n_in), |_| (rng.gen_range(-1.0..1.0f32)) * scale);
        ProjectionProvider {
            dim,
            input_shape,
            weights,
            text_renders: 6,
        }
    }
}

impl EmbeddingProvider for ProjectionProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, img: &Image) -> Result<Vec<f32>> {
        if img.shape() != self.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "projection provider expects {:?}, got {:?}",
                self.input_shape,
                img.shape()
            )));
        }
        let flat: Vec<f32> = img.pixels.iter().copied().chain(std::iter::once(1.0)).collect();
        let mut out = vec![0.0f32; self.dim];
        for (row, o) in self.weights.rows().into_iter().zip(out.iter_mut()) {
            let mut acc = 0.0f64;
            for (w, x) in row.iter().zip(&flat) {
                acc += (*w as f64) * (*x as f64);
            }
            *o = acc as f32;
        }
        l2_normalize(&mut out)?;
        Ok(out)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let base = fnv1a(text);
        if let Some(pattern) = synth::pattern_from_text(text) {
            // Ground the description: render canonical exemplars of the
            // named pattern (tinted per any named hue family) and average
            // their image embeddings.
            let band = synth::hue_band_from_text(text);
            let mut acc = vec![0.0f64; self.dim];
            for i in 0..self.text_renders {
                let img =
                    synth::canonical_pattern_image(pattern, base.wrapping_add(i as u64), band);
                let e = self.embed_image(&img)?;
                for (a, v) in acc.iter_mut().zip(&e) {
                    *a += *v as f64;
                }
            }
            let mut out: Vec<f32> = acc
                .iter()
                .map(|&v| (v / self.text_renders as f64) as f32)
                .collect();
            l2_normalize(&mut out)?;
            return Ok(out);
        }
        // Unknown text: stable hash-seeded direction.
        let mut rng = ChaCha8Rng::seed_from_u64(base);
        let mut out: Vec<f32> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        l2_normalize(&mut out)?;
        Ok(out)
    }
}

/// Content-addressed key for file-backed image embeddings: sha256 over the
/// packed tensor layout (LE u32 dims then quantized bytes).
pub fn image_content_key(img: &Image) -> String {
    let (c, h, w) = img.shape();
    let mut hasher = Sha256::new();
    for d in [c as u32, h as u32, w as u32] {
        hasher.update(d.to_le_bytes());
    }
    hasher.update(img.to_u8());
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct EmbeddingFile {
    dim: usize,
    images: BTreeMap<String, Vec<f32>>,
    texts: BTreeMap<String, Vec<f32>>,
}

/// Precomputed embeddings produced by an external encoder.
pub struct FileProvider {
    dim: usize,
    images: BTreeMap<String, Vec<f32>>,
    texts: BTreeMap<String, Vec<f32>>,
}

impl FileProvider {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: EmbeddingFile = serde_json::from_slice(&bytes)?;
        let mut images = file.images;
        let mut texts = file.texts;
        for v in images.values_mut().chain(texts.values_mut()) {
            if v.len() != file.dim {
                return Err(Error::Format(format!(
                    "{}: embedding with dim {} in a dim-{} file",
                    path.display(),
                    v.len(),
                    file.dim
                )));
            }
            l2_normalize(v)?;
        }
        Ok(FileProvider {
            dim: file.dim,
            images,
            texts,
        })
    }

    pub fn save(
        path: &Path,
        dim: usize,
        images: BTreeMap<String, Vec<f32>>,
        texts: BTreeMap<String, Vec<f32>>,
    ) -> Result<()> {
        let file = EmbeddingFile { dim, images, texts };
        std::fs::write(path, serde_json::to_vec_pretty(&file)?).map_err(|e| Error::io(path, e))
    }
}

impl EmbeddingProvider for FileProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, img: &Image) -> Result<Vec<f32>> {
        let key = image_content_key(img);
        self.images
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::Precondition(format!("no precomputed embedding for image {key}")))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        self.texts
            .get(text)
            .cloned()
            .ok_or_else(|| Error::Precondition(format!("no precomputed embedding for text {text:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn projection_is_unit_norm_and_deterministic() {
        let p = ProjectionProvider::new((3, 8, 8), 16, 5);
        let img = Image::new(Array3::from_elem((3, 8, 8), 0.25f32));
        let a = p.embed_image(&img).unwrap();
        let b = p.embed_image(&img).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_image_still_embeds() {
        let p = ProjectionProvider::new((3, 4, 4), 8, 1);
        let img = Image::new(Array3::zeros((3, 4, 4)));
        assert!(p.embed_image(&img).is_ok()); // constant lane prevents collapse
    }

    #[test]
    fn grounded_text_matches_pattern_images_better_than_random_text() {
        let p = ProjectionProvider::new((3, 32, 32), 64, 9);
        let t_rings = p.embed_text("a texture of concentric rings").unwrap();
        let rings_img = synth::canonical_pattern_image(3, 777, None);
        let e = p.embed_image(&rings_img).unwrap();
        let dot = |a: &[f32], b: &[f32]| -> f64 {
            a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
        };
        let t_junk = p.embed_text("completely unrelated words").unwrap();
        assert!(dot(&t_rings, &e) > dot(&t_junk, &e));
    }

    #[test]
    fn file_provider_roundtrip_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.json");
        let img = Image::new(Array3::from_elem((1, 2, 2), 0.5f32));
        let key = image_content_key(&img);
        let mut images = BTreeMap::new();
        images.insert(key, vec![3.0f32, 4.0]);
        let mut texts = BTreeMap::new();
        texts.insert("hello".to_string(), vec![1.0f32, 0.0]);
        FileProvider::save(&path, 2, images, texts).unwrap();
        let p = FileProvider::load(&path).unwrap();
        let e = p.embed_image(&img).unwrap();
        assert!((e[0] - 0.6).abs() < 1e-6 && (e[1] - 0.8).abs() < 1e-6);
        assert!(p.embed_text("hello").is_ok());
        assert!(p.embed_text("missing").is_err());
        let other = Image::new(Array3::from_elem((1, 2, 2), 0.9f32));
        assert!(p.embed_image(&other).is_err());
    }
}
