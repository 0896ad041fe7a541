//! Transfer-set curation: description prototypes, zero-shot gallery
//! binning, per-class distribution digests, a persisted feature bank, and
//! proximity-ranked selection filtered by teacher consensus.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{Image, LabeledDataset};
use crate::dov::MarkedDataset;
use crate::embed::{l2_normalize, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par;

pub const BANK_MAGIC: &[u8; 8] = b"EDOVFB01";
pub const BANK_CLASS_SENTINEL: u16 = 0xFFFF;

/// Per-class description strings, keyed by class name.
#[derive(Debug, Clone)]
pub struct DescriptionSet(pub BTreeMap<String, Vec<String>>);

impl DescriptionSet {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, Vec<String>> = serde_json::from_slice(&bytes)?;
        Ok(DescriptionSet(map))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(&self.0)?).map_err(|e| Error::io(path, e))
    }

    /// Descriptions in class order; every class must have at least one.
    pub fn for_classes(&self, class_names: &[String]) -> Result<Vec<&[String]>> {
        class_names
            .iter()
            .map(|name| {
                self.0
                    .get(name)
                    .map(|v| v.as_slice())
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| {
                        Error::Precondition(format!("class {name:?} has no descriptions"))
                    })
            })
            .collect()
    }
}

/// Per-class text anchors. `mean` keeps the raw average of unit description
/// embeddings (argmax over mean-of-similarities needs the unnormalized
/// mean); `unit` is the renormalized prototype.
#[derive(Debug, Clone)]
pub struct ClassPrototypes {
    pub mean: Vec<Vec<f32>>,
    pub unit: Vec<Vec<f32>>,
    pub dim: usize,
}

pub fn class_prototypes(
    provider: &dyn EmbeddingProvider,
    descriptions: &DescriptionSet,
    class_names: &[String],
) -> Result<ClassPrototypes> {
    let per_class = descriptions.for_classes(class_names)?;
    let d = provider.dim();
    let mut mean = Vec::with_capacity(per_class.len());
    let mut unit = Vec::with_capacity(per_class.len());
    for descs in per_class {
        let mut acc = vec![0.0f64; d];
        for text in descs {
            let e = provider.embed_text(text)?;
            for (a, v) in acc.iter_mut().zip(&e) {
                *a += *v as f64;
            }
        }
        let m: Vec<f32> = acc.iter().map(|&v| (v / descs.len() as f64) as f32).collect();
        let mut u = m.clone();
        l2_normalize(&mut u).map_err(|_| {
            Error::Precondition("degenerate zero-mean description prototype".into())
        })?;
        mean.push(m);
        unit.push(u);
    }
    Ok(ClassPrototypes { mean, unit, dim: d })
}

pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64> {
    let nu: f64 = u.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if nu < 1e-12 || nv < 1e-12 {
        return Err(Error::Precondition(
            "cosine similarity of a zero vector".into(),
        ));
    }
    let dot: f64 = u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
    Ok(dot / (nu * nv))
}

fn dot64(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Persisted gallery embeddings with optional class assignments.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    pub dim: usize,
    pub ids: Vec<u64>,
    pub classes: Vec<u16>,
    pub embeddings: Vec<Vec<f32>>,
}

impl FeatureBank {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
        put(BANK_MAGIC)?;
        put(&(self.len() as u32).to_le_bytes())?;
        put(&(self.dim as u32).to_le_bytes())?;
        for i in 0..self.len() {
            put(&self.ids[i].to_le_bytes())?;
            put(&self.classes[i].to_le_bytes())?;
            for &v in &self.embeddings[i] {
                put(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != BANK_MAGIC {
            return Err(Error::Format(format!(
                "{}: bad feature bank magic",
                path.display()
            )));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
        let n = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
        let dim = u32::from_le_bytes(b4) as usize;
        let mut ids = Vec::with_capacity(n);
        let mut classes = Vec::with_capacity(n);
        let mut embeddings = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8).map_err(|e| Error::io(path, e))?;
            ids.push(u64::from_le_bytes(b8));
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2).map_err(|e| Error::io(path, e))?;
            classes.push(u16::from_le_bytes(b2));
            let mut emb = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
                emb.push(f32::from_le_bytes(b4));
            }
            embeddings.push(emb);
        }
        Ok(FeatureBank {
            dim,
            ids,
            classes,
            embeddings,
        })
    }
}

/// Embed every gallery image once and persist the bank.
pub fn build_feature_bank(
    provider: &dyn EmbeddingProvider,
    gallery: &LabeledDataset,
    path: &Path,
) -> Result<FeatureBank> {
    let embeddings: Vec<Result<Vec<f32>>> = par::map_range(gallery.len(), |i| {
        provider.embed_image(&gallery.images[i])
    });
    let embeddings: Result<Vec<Vec<f32>>> = embeddings.into_iter().collect();
    let embeddings = embeddings?;
    let bank = FeatureBank {
        dim: provider.dim(),
        ids: gallery.ids.clone(),
        classes: vec![BANK_CLASS_SENTINEL; gallery.len()],
        embeddings,
    };
    bank.save(path)?;
    Ok(bank)
}

/// Bin bank entries by argmax similarity to the class prototypes. Ties go
/// to the lowest class index. Bins partition the bank.
pub fn assign_from_bank(bank: &FeatureBank, prototypes: &ClassPrototypes) -> Vec<Vec<u64>> {
    let k = prototypes.mean.len();
    let picks: Vec<usize> = par::map_range(bank.len(), |i| {
        let emb = &bank.embeddings[i];
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (c, proto) in prototypes.mean.iter().enumerate() {
            let score = dot64(emb, proto);
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        best
    });
    let mut bins = vec![Vec::new(); k];
    for (i, &c) in picks.iter().enumerate() {
        bins[c].push(bank.ids[i]);
    }
    bins
}

/// Embed the gallery on the fly and bin it (no persisted bank).
pub fn assign_gallery(
    provider: &dyn EmbeddingProvider,
    gallery: &LabeledDataset,
    prototypes: &ClassPrototypes,
) -> Result<Vec<Vec<u64>>> {
    let embeddings: Result<Vec<Vec<f32>>> =
        par::map_range(gallery.len(), |i| provider.embed_image(&gallery.images[i]))
            .into_iter()
            .collect();
    let bank = FeatureBank {
        dim: provider.dim(),
        ids: gallery.ids.clone(),
        classes: vec![BANK_CLASS_SENTINEL; gallery.len()],
        embeddings: embeddings?,
    };
    Ok(assign_from_bank(&bank, prototypes))
}

/// Per-class mean image embedding of the (possibly relabeled) dataset.
#[derive(Debug, Clone)]
pub struct DistributionDigest {
    pub centroids: Vec<Vec<f32>>,
    pub dim: usize,
}

pub fn compute_digests(
    provider: &dyn EmbeddingProvider,
    marked: &MarkedDataset,
) -> Result<DistributionDigest> {
    let ds = &marked.dataset;
    let k = ds.k();
    let d = provider.dim();
    let embeddings: Result<Vec<Vec<f32>>> =
        par::map_range(ds.len(), |i| provider.embed_image(&ds.images[i]))
            .into_iter()
            .collect();
    let embeddings = embeddings?;
    let mut sums = vec![vec![0.0f64; d]; k];
    let mut counts = vec![0usize; k];
    for (i, emb) in embeddings.iter().enumerate() {
        let c = ds.labels[i];
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(emb) {
            *s += *v as f64;
        }
    }
    let mut centroids = Vec::with_capacity(k);
    for (c, (sum, count)) in sums.into_iter().zip(counts).enumerate() {
        if count == 0 {
            return Err(Error::EmptyClass(c));
        }
        centroids.push(sum.iter().map(|&v| (v / count as f64) as f32).collect());
    }
    Ok(DistributionDigest { centroids, dim: d })
}

#[derive(Debug, Clone)]
pub struct ClassSelection {
    pub class: usize,
    pub ids: Vec<u64>,
    pub quota: usize,
    pub shortfall: usize,
}

#[derive(Debug, Clone)]
pub struct TransferSet {
    pub per_class: Vec<ClassSelection>,
}

impl TransferSet {
    pub fn total(&self) -> usize {
        self.per_class.iter().map(|c| c.ids.len()).sum()
    }

    pub fn shortfalls(&self) -> Vec<(usize, usize)> {
        self.per_class
            .iter()
            .filter(|c| c.shortfall > 0)
            .map(|c| (c.class, c.shortfall))
            .collect()
    }

    /// Materialize into a dataset labeled by assigned class (equal to the
    /// teacher prediction for every selected sample, by construction).
    pub fn materialize(
        &self,
        gallery: &LabeledDataset,
        class_names: &[String],
    ) -> Result<LabeledDataset> {
        let mut images: Vec<Image> = Vec::with_capacity(self.total());
        let mut labels = Vec::with_capacity(self.total());
        let mut ids = Vec::with_capacity(self.total());
        for sel in &self.per_class {
            for id in &sel.ids {
                let idx = gallery
                    .index_of_id(*id)
                    .ok_or_else(|| Error::Precondition(format!("id {id} not in gallery")))?;
                images.push(gallery.images[idx].clone());
                labels.push(sel.class);
                ids.push(*id);
            }
        }
        LabeledDataset::new(images, labels, class_names.to_vec(), ids)
    }
}

const PRED_BLOCK: usize = 256;

/// Walk each bin in descending digest similarity, keeping candidates the
/// teacher also assigns to the bin class, until the quota fills. Bins that
/// exhaust first record a shortfall; nothing is backfilled.
pub fn curate_transfer_set(
    bins: &[Vec<u64>],
    digest: &DistributionDigest,
    teacher: &dyn Model,
    gallery: &LabeledDataset,
    bank: &FeatureBank,
    quotas: &[usize],
) -> Result<TransferSet> {
    if bins.len() != digest.centroids.len() || bins.len() != quotas.len() {
        return Err(Error::Precondition(
            "bins, digests, and quotas must agree on K".into(),
        ));
    }
    let mut per_class = Vec::with_capacity(bins.len());
    for (class, bin) in bins.iter().enumerate() {
        let centroid = &digest.centroids[class];
        let mut scored: Vec<(u64, f64)> = bin
            .iter()
            .map(|&id| {
                let idx = bank
                    .index_of(id)
                    .ok_or_else(|| Error::Precondition(format!("id {id} not in bank")))?;
                Ok((id, cosine_similarity(&bank.embeddings[idx], centroid)?))
            })
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

        let quota = quotas[class];
        let mut selected = Vec::with_capacity(quota);
        'outer: for block in scored.chunks(PRED_BLOCK) {
            let positions: Vec<usize> = block
                .iter()
                .map(|(id, _)| gallery.index_of_id(*id).expect("bank ids come from gallery"))
                .collect();
            let batch = gallery.gather_batch(&positions);
            let preds = teacher.predict_batch(batch.view());
            for ((id, _), pred) in block.iter().zip(preds) {
                if pred == class {
                    selected.push(*id);
                    if selected.len() == quota {
                        break 'outer;
                    }
                }
            }
        }
        let shortfall = quota.saturating_sub(selected.len());
        per_class.push(ClassSelection {
            class,
            ids: selected,
            quota,
            shortfall,
        });
    }
    Ok(TransferSet { per_class })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3, ArrayView4};

    /// Embeds an image as its first `dim` pixels, normalized; text via map.
    struct PixelProvider {
        dim: usize,
        texts: BTreeMap<String, Vec<f32>>,
    }

    impl EmbeddingProvider for PixelProvider {
        fn dim(&self) -> usize {
            self.dim
        }
        fn embed_image(&self, img: &Image) -> Result<Vec<f32>> {
            let mut v: Vec<f32> = img.pixels.iter().take(self.dim).copied().collect();
            l2_normalize(&mut v)?;
            Ok(v)
        }
        fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
            let mut v = self
                .texts
                .get(text)
                .cloned()
                .ok_or_else(|| Error::Precondition(format!("no text {text}")))?;
            l2_normalize(&mut v)?;
            Ok(v)
        }
    }

    fn image_with_head(dim_vals: &[f32]) -> Image {
        let mut px = Array3::from_elem((1, 4, 4), 0.0f32);
        for (i, &v) in dim_vals.iter().enumerate() {
            px[[0, i / 4, i % 4]] = v;
        }
        Image::new(px)
    }

    fn ds_from_images(images: Vec<Image>, labels: Vec<usize>, k: usize, base: u64) -> LabeledDataset {
        let n = images.len();
        LabeledDataset::new(
            images,
            labels,
            (0..k).map(|i| format!("class_{i}")).collect(),
            (0..n as u64).map(|i| base + i).collect(),
        )
        .unwrap()
    }

    struct ScriptedModel {
        k: usize,
        // Predict class = round(first pixel * scale) capped.
        scale: f32,
    }

    impl Model for ScriptedModel {
        fn num_classes(&self) -> usize {
            self.k
        }
        fn logits_batch(&self, x: ArrayView4<f32>) -> Array2<f32> {
            let n = x.dim().0;
            let mut out = Array2::zeros((n, self.k));
            for i in 0..n {
                let v = x[[i, 0, 0, 0]] * self.scale;
                let class = (v.round() as usize).min(self.k - 1);
                out[[i, class]] = 9.0;
            }
            out
        }
    }

    #[test]
    fn prototype_examples() {
        let mut texts = BTreeMap::new();
        texts.insert("a".to_string(), vec![1.0, 0.0]);
        texts.insert("a2".to_string(), vec![1.0, 0.0]);
        texts.insert("b".to_string(), vec![0.0, 1.0]);
        let p = PixelProvider { dim: 2, texts };
        let mut ds = DescriptionSet(BTreeMap::new());
        ds.0.insert("class_0".into(), vec!["a".into()]);
        ds.0.insert("class_1".into(), vec!["a".into(), "a2".into()]);
        ds.0.insert("class_2".into(), vec!["a".into(), "b".into()]);
        let names = vec!["class_0".to_string(), "class_1".into(), "class_2".into()];
        let protos = class_prototypes(&p, &ds, &names).unwrap();
        // Single description: prototype equals its embedding.
        assert!((protos.unit[0][0] - 1.0).abs() < 1e-6);
        // Two identical descriptions: same as one.
        assert_eq!(protos.unit[0], protos.unit[1]);
        // Two orthogonal unit embeddings: renormalized mean has cos 1/sqrt(2).
        let c = cosine_similarity(&protos.unit[2], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[0.3, 0.4], &[0.3, 0.4]).unwrap() - 1.0).abs() < 1e-9);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 2.0]).unwrap().abs() < 1e-9);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn assignment_partition_and_ties() {
        let mut texts = BTreeMap::new();
        texts.insert("x".to_string(), vec![1.0, 0.0]);
        texts.insert("y".to_string(), vec![0.0, 1.0]);
        let p = PixelProvider { dim: 2, texts };
        let mut dset = DescriptionSet(BTreeMap::new());
        dset.0.insert("class_0".into(), vec!["x".into()]);
        dset.0.insert("class_1".into(), vec!["y".into()]);
        let names = vec!["class_0".to_string(), "class_1".into()];
        let protos = class_prototypes(&p, &dset, &names).unwrap();
        let gallery = ds_from_images(
            vec![
                image_with_head(&[1.0, 0.0]),  // exactly prototype 0
                image_with_head(&[0.0, 1.0]),  // exactly prototype 1
                image_with_head(&[0.5, 0.5]),  // tie -> class 0
                image_with_head(&[0.2, 0.9]),  // class 1
            ],
            vec![0, 0, 0, 0],
            1,
            100,
        );
        let bins = assign_gallery(&p, &gallery, &protos).unwrap();
        assert_eq!(bins[0], vec![100, 102]);
        assert_eq!(bins[1], vec![101, 103]);
        assert_eq!(bins.iter().map(|b| b.len()).sum::<usize>(), gallery.len());
    }

    #[test]
    fn digest_mean_and_outlier_resistance() {
        let p = PixelProvider {
            dim: 2,
            texts: BTreeMap::new(),
        };
        // Clean cluster along (1,0); 10% outliers along (0,1).
        let mut images = vec![];
        let mut labels = vec![];
        for _ in 0..18 {
            images.push(image_with_head(&[1.0, 0.05]));
            labels.push(0);
        }
        for _ in 0..2 {
            images.push(image_with_head(&[0.0, 1.0]));
            labels.push(0);
        }
        let ds = ds_from_images(images, labels, 1, 0);
        let marked = MarkedDataset {
            dataset: ds.clone(),
            materials: dummy_materials(),
        };
        let digest = compute_digests(&p, &marked).unwrap();
        // Straight-line oracle: average the same embeddings by hand.
        let mut expect = [0.0f64; 2];
        for img in &ds.images {
            let e = p.embed_image(img).unwrap();
            expect[0] += e[0] as f64;
            expect[1] += e[1] as f64;
        }
        expect[0] /= 20.0;
        expect[1] /= 20.0;
        assert!((digest.centroids[0][0] as f64 - expect[0]).abs() < 1e-6);
        assert!((digest.centroids[0][1] as f64 - expect[1]).abs() < 1e-6);
        // Contamination bound: cosine gap to the clean centroid < outlier fraction.
        let clean: Vec<f32> = vec![1.0, 0.05];
        let gap = 1.0 - cosine_similarity(&digest.centroids[0], &clean).unwrap();
        assert!(gap < 0.10, "gap={gap}");
    }

    #[test]
    fn digest_duplication_invariance_and_empty_class() {
        let p = PixelProvider {
            dim: 2,
            texts: BTreeMap::new(),
        };
        let one = ds_from_images(vec![image_with_head(&[0.6, 0.8])], vec![0], 1, 0);
        let marked = MarkedDataset {
            dataset: one.clone(),
            materials: dummy_materials(),
        };
        let d1 = compute_digests(&p, &marked).unwrap();
        // Single sample: centroid equals its embedding.
        let e = p.embed_image(&one.images[0]).unwrap();
        assert!((d1.centroids[0][0] - e[0]).abs() < 1e-7);
        // Duplicated sample set: unchanged centroid.
        let dup = ds_from_images(
            vec![image_with_head(&[0.6, 0.8]), image_with_head(&[0.6, 0.8])],
            vec![0, 0],
            1,
            0,
        );
        let d2 = compute_digests(
            &p,
            &MarkedDataset {
                dataset: dup,
                materials: dummy_materials(),
            },
        )
        .unwrap();
        assert_eq!(d1.centroids, d2.centroids);
        // Empty class errors.
        let missing = ds_from_images(vec![image_with_head(&[1.0, 0.0])], vec![0], 2, 0);
        assert!(compute_digests(
            &p,
            &MarkedDataset {
                dataset: missing,
                materials: dummy_materials(),
            }
        )
        .is_err());
    }

    fn dummy_materials() -> crate::dov::VerificationMaterials {
        crate::dov::VerificationMaterials {
            method: crate::dov::DovMethod::Fingerprint,
            trigger: None,
            target_class: None,
            hue_shift: None,
            key_image: None,
            blend_ratio: None,
            marked_ids: Default::default(),
            train_probe_ids: Default::default(),
            heldout_probe_ids: Default::default(),
        }
    }

    #[test]
    fn bank_roundtrip_bit_exact_and_empty_ok() {
        let p = PixelProvider {
            dim: 2,
            texts: BTreeMap::new(),
        };
        let gallery = ds_from_images(
            vec![image_with_head(&[0.3, 0.7]), image_with_head(&[0.9, 0.1])],
            vec![0, 0],
            1,
            500,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.bin");
        let bank = build_feature_bank(&p, &gallery, &path).unwrap();
        let re = FeatureBank::load(&path).unwrap();
        assert_eq!(re.ids, bank.ids);
        for (a, b) in re.embeddings.iter().zip(&bank.embeddings) {
            assert_eq!(a, b, "bit-exact reload");
        }
        // Empty bank is valid.
        let empty = ds_from_images(vec![], vec![], 1, 0);
        let path2 = dir.path().join("empty.bin");
        let eb = build_feature_bank(&p, &empty, &path2).unwrap();
        assert!(eb.is_empty());
        assert!(FeatureBank::load(&path2).unwrap().is_empty());
        // Corrupted magic.
        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, b"XXXXXXXX\0\0\0\0\0\0\0\0").unwrap();
        assert!(FeatureBank::load(&bad).is_err());
    }

    /// Independent straight-line re-implementation of the selection loop on
    /// a 30-sample bin, compared against `curate_transfer_set`.
    #[test]
    fn curation_matches_line_by_line_oracle() {
        let provider = PixelProvider {
            dim: 2,
            texts: BTreeMap::new(),
        };
        let mut images = Vec::new();
        for i in 0..30 {
            // First pixel encodes a score in [0.05, 1.0]; teacher predicts
            // class 0 iff first pixel < 0.5 (scale chosen below).
            let v = (i as f32 + 1.0) / 30.0;
            images.push(image_with_head(&[v, 1.0 - v]));
        }
        let gallery = ds_from_images(images, vec![0; 30], 1, 1000);
        let bank = {
            let dir = tempfile::tempdir().unwrap();
            build_feature_bank(&provider, &gallery, &dir.path().join("b.bin")).unwrap()
        };
        let digest = DistributionDigest {
            centroids: vec![vec![1.0, 0.0]],
            dim: 2,
        };
        let bins = vec![gallery.ids.clone()];
        let teacher = ScriptedModel { k: 2, scale: 1.4 };
        let quotas = vec![8usize];
        let got = curate_transfer_set(&bins, &digest, &teacher, &gallery, &bank, &quotas).unwrap();

        // Oracle: sort by similarity descending, walk, filter on teacher
        // prediction == 0, stop at quota.
        let mut oracle: Vec<(u64, f64)> = gallery
            .ids
            .iter()
            .map(|&id| {
                let idx = bank.index_of(id).unwrap();
                (
                    id,
                    cosine_similarity(&bank.embeddings[idx], &digest.centroids[0]).unwrap(),
                )
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut expect = Vec::new();
        for (id, _) in oracle {
            let idx = gallery.index_of_id(id).unwrap();
            let batch = gallery.gather_batch(&[idx]);
            let pred = teacher.predict_batch(batch.view())[0];
            if pred == 0 {
                expect.push(id);
                if expect.len() == 8 {
                    break;
                }
            }
        }
        assert_eq!(got.per_class[0].ids, expect);
        assert_eq!(got.per_class[0].shortfall, 0);
    }

    #[test]
    fn curation_shortfall_when_teacher_never_agrees() {
        let provider = PixelProvider {
            dim: 2,
            texts: BTreeMap::new(),
        };
        let images: Vec<Image> = (0..5).map(|i| image_with_head(&[0.9, 0.1 * i as f32])).collect();
        let gallery = ds_from_images(images, vec![0; 5], 1, 0);
        let dir = tempfile::tempdir().unwrap();
        let bank = build_feature_bank(&provider, &gallery, &dir.path().join("b.bin")).unwrap();
        let digest = DistributionDigest {
            centroids: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            dim: 2,
        };
        let bins = vec![vec![], gallery.ids.clone()]; // all ids in bin 1
        let teacher = ScriptedModel { k: 2, scale: 0.0 }; // always predicts 0
        let ts = curate_transfer_set(&bins, &digest, &teacher, &gallery, &bank, &[3, 4]).unwrap();
        assert!(ts.per_class[1].ids.is_empty());
        assert_eq!(ts.per_class[1].shortfall, 4);
        // Consensus property holds post hoc on every selected sample.
        for sel in &ts.per_class {
            for id in &sel.ids {
                let idx = gallery.index_of_id(*id).unwrap();
                let pred = teacher.predict_batch(gallery.gather_batch(&[idx]).view())[0];
                assert_eq!(pred, sel.class);
            }
        }
    }
}
