//! Dataset-ownership identifiers: embedding (BadNets-style patch triggers,
//! untargeted label-randomized triggers, hue-space marking, key-image
//! blending) and the matching verification probes, plus a train/heldout
//! loss-gap fingerprint test.

use std::collections::BTreeSet;

use base64::Engine as _;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::hue_rotate;
use crate::data::{Image, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{layers, Model};
use crate::stats::{welch_one_tailed, Alternative, MetricKind, VerificationReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DovMethod {
    Badnets,
    Ubw,
    Anw,
    Isotope,
    Fingerprint,
}

impl DovMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            DovMethod::Badnets => "badnets",
            DovMethod::Ubw => "ubw",
            DovMethod::Anw => "anw",
            DovMethod::Isotope => "isotope",
            DovMethod::Fingerprint => "fingerprint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "badnets" => Ok(DovMethod::Badnets),
            "ubw" => Ok(DovMethod::Ubw),
            "anw" => Ok(DovMethod::Anw),
            "isotope" => Ok(DovMethod::Isotope),
            "fingerprint" => Ok(DovMethod::Fingerprint),
            other => Err(Error::Config(format!("unknown dov method {other:?}"))),
        }
    }
}

/// A patch trigger: `patch` replaces pixels wherever `mask` is 1, anchored
/// at `position` (row, col).
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerPattern {
    pub patch: Array3<f32>,
    pub mask: Array2<f32>,
    pub position: (usize, usize),
}

impl TriggerPattern {
    /// Checkerboard patch of the given side length in the image corner
    /// nearest to (row, col).
    pub fn checkerboard(channels: usize, side: usize, position: (usize, usize)) -> Self {
        let patch = Array3::from_shape_fn((channels, side, side), |(_, y, x)| {
            if (y + x) % 2 == 0 {
                1.0
            } else {
                0.0
            }
        });
        let mask = Array2::ones((side, side));
        TriggerPattern {
            patch,
            mask,
            position,
        }
    }

    pub fn validate_for(&self, shape: (usize, usize, usize)) -> Result<()> {
        let (c, h, w) = shape;
        let (pc, ph, pw) = {
            let s = self.patch.shape();
            (s[0], s[1], s[2])
        };
        if self.mask.shape() != [ph, pw] {
            return Err(Error::ShapeMismatch(
                "trigger mask and patch shapes disagree".into(),
            ));
        }
        if pc != c || self.position.0 + ph > h || self.position.1 + pw > w {
            return Err(Error::Precondition(format!(
                "trigger {}x{}x{} at {:?} does not fit image {}x{}x{}",
                pc, ph, pw, self.position, c, h, w
            )));
        }
        Ok(())
    }

    pub fn apply(&self, img: &Image) -> Image {
        let mut out = img.clone();
        let s = self.patch.shape();
        let (pc, ph, pw) = (s[0], s[1], s[2]);
        for y in 0..ph {
            for x in 0..pw {
                if self.mask[[y, x]] >= 0.5 {
                    for c in 0..pc {
                        out.pixels[[c, self.position.0 + y, self.position.1 + x]] =
                            self.patch[[c, y, x]];
                    }
                }
            }
        }
        out
    }
}

/// Everything the verifier holds to identify its dataset.
#[derive(Debug, Clone)]
pub struct VerificationMaterials {
    pub method: DovMethod,
    pub trigger: Option<TriggerPattern>,
    pub target_class: Option<usize>,
    pub hue_shift: Option<f32>,
    pub key_image: Option<Image>,
    pub blend_ratio: Option<f32>,
    pub marked_ids: BTreeSet<u64>,
    pub train_probe_ids: BTreeSet<u64>,
    pub heldout_probe_ids: BTreeSet<u64>,
}

impl VerificationMaterials {
    fn empty(method: DovMethod) -> Self {
        VerificationMaterials {
            method,
            trigger: None,
            target_class: None,
            hue_shift: None,
            key_image: None,
            blend_ratio: None,
            marked_ids: BTreeSet::new(),
            train_probe_ids: BTreeSet::new(),
            heldout_probe_ids: BTreeSet::new(),
        }
    }
}

/// A dataset with identifiers embedded plus the materials that verify them.
#[derive(Debug, Clone)]
pub struct MarkedDataset {
    pub dataset: LabeledDataset,
    pub materials: VerificationMaterials,
}

fn pick_marked(n: usize, rate: f64, seed: u64) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Precondition(format!(
            "poison rate must lie in (0,1], got {rate}"
        )));
    }
    let m = (rate * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, n, m).into_vec();
    picks.sort_unstable();
    Ok(picks)
}

pub fn embed_badnets(
    d: &LabeledDataset,
    trigger: &TriggerPattern,
    target: usize,
    rate: f64,
    seed: u64,
) -> Result<MarkedDataset> {
    trigger.validate_for(d.shape())?;
    if target >= d.k() {
        return Err(Error::Precondition(format!(
            "target class {target} out of range"
        )));
    }
    let picks = pick_marked(d.len(), rate, seed)?;
    let mut out = d.clone();
    let mut materials = VerificationMaterials::empty(DovMethod::Badnets);
    materials.trigger = Some(trigger.clone());
    materials.target_class = Some(target);
    for &i in &picks {
        out.images[i] = trigger.apply(&out.images[i]);
        out.labels[i] = target;
        materials.marked_ids.insert(out.ids[i]);
    }
    Ok(MarkedDataset {
        dataset: out,
        materials,
    })
}

pub fn embed_ubw(
    d: &LabeledDataset,
    trigger: &TriggerPattern,
    rate: f64,
    seed: u64,
) -> Result<MarkedDataset> {
    if d.k() < 2 {
        return Err(Error::Precondition("untargeted marking needs K >= 2".into()));
    }
    trigger.validate_for(d.shape())?;
    let picks = pick_marked(d.len(), rate, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut out = d.clone();
    let mut materials = VerificationMaterials::empty(DovMethod::Ubw);
    materials.trigger = Some(trigger.clone());
    for &i in &picks {
        out.images[i] = trigger.apply(&out.images[i]);
        // Uniform over the K-1 classes other than the true label.
        let draw = rng.gen_range(0..d.k() - 1);
        let new_label = if draw >= out.labels[i] { draw + 1 } else { draw };
        out.labels[i] = new_label;
        materials.marked_ids.insert(out.ids[i]);
    }
    Ok(MarkedDataset {
        dataset: out,
        materials,
    })
}

pub fn embed_anw(d: &LabeledDataset, hue_shift: f32, rate: f64, seed: u64) -> Result<MarkedDataset> {
    if !(hue_shift > 0.0 && hue_shift < 360.0) {
        return Err(Error::Precondition(format!(
            "hue shift must lie in (0, 360) degrees, got {hue_shift}"
        )));
    }
    if d.shape().0 != 3 {
        return Err(Error::Precondition(
            "hue-space marking needs RGB input".into(),
        ));
    }
    let picks = pick_marked(d.len(), rate, seed)?;
    let mut out = d.clone();
    let mut materials = VerificationMaterials::empty(DovMethod::Anw);
    materials.hue_shift = Some(hue_shift);
    for &i in &picks {
        out.images[i] = hue_rotate(&out.images[i], hue_shift);
        materials.marked_ids.insert(out.ids[i]);
    }
    Ok(MarkedDataset {
        dataset: out,
        materials,
    })
}

pub fn blend_with(img: &Image, key: &Image, blend_ratio: f32) -> Image {
    let pixels = img
        .pixels
        .iter()
        .zip(key.pixels.iter())
        .map(|(&x, &k)| (blend_ratio * x + (1.0 - blend_ratio) * k).clamp(0.0, 1.0))
        .collect();
    Image {
        pixels: Array3::from_shape_vec(img.pixels.raw_dim(), pixels).unwrap(),
        eight_bit_source: img.eight_bit_source,
    }
}

pub fn embed_isotope(
    d: &LabeledDataset,
    key_image: &Image,
    blend_ratio: f32,
    rate: f64,
    seed: u64,
) -> Result<MarkedDataset> {
    if key_image.shape() != d.shape() {
        return Err(Error::ShapeMismatch(
            "key image shape must match dataset".into(),
        ));
    }
    if !(blend_ratio > 0.0 && blend_ratio < 1.0) {
        return Err(Error::Precondition(format!(
            "blend ratio must lie strictly inside (0,1), got {blend_ratio}"
        )));
    }
    let picks = pick_marked(d.len(), rate, seed)?;
    let mut out = d.clone();
    let mut materials = VerificationMaterials::empty(DovMethod::Isotope);
    materials.key_image = Some(key_image.clone());
    materials.blend_ratio = Some(blend_ratio);
    for &i in &picks {
        out.images[i] = blend_with(&out.images[i], key_image, blend_ratio);
        materials.marked_ids.insert(out.ids[i]);
    }
    Ok(MarkedDataset {
        dataset: out,
        materials,
    })
}

/// Select disjoint probe id sets for the loss-gap fingerprint.
pub fn fingerprint_materials(
    train: &LabeledDataset,
    heldout: &LabeledDataset,
    probe_size: usize,
    seed: u64,
) -> Result<VerificationMaterials> {
    if train.len() < probe_size || heldout.len() < probe_size {
        return Err(Error::Precondition(
            "probe size exceeds available samples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut materials = VerificationMaterials::empty(DovMethod::Fingerprint);
    for idx in rand::seq::index::sample(&mut rng, train.len(), probe_size) {
        materials.train_probe_ids.insert(train.ids[idx]);
    }
    for idx in rand::seq::index::sample(&mut rng, heldout.len(), probe_size) {
        materials.heldout_probe_ids.insert(heldout.ids[idx]);
    }
    Ok(materials)
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

const EVAL_BATCH: usize = 256;

fn predict_images(model: &dyn Model, images: &[Image]) -> Vec<usize> {
    let mut preds = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let (c, h, w) = chunk[0].shape();
        let mut batch = ndarray::Array4::zeros((chunk.len(), c, h, w));
        for (i, img) in chunk.iter().enumerate() {
            batch
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&img.pixels);
        }
        preds.extend(model.predict_batch(batch.view()));
    }
    preds
}

fn logits_images(model: &dyn Model, images: &[Image]) -> Array2<f32> {
    let mut out = Array2::zeros((images.len(), model.num_classes()));
    let mut row = 0usize;
    for chunk in images.chunks(EVAL_BATCH) {
        let (c, h, w) = chunk[0].shape();
        let mut batch = ndarray::Array4::zeros((chunk.len(), c, h, w));
        for (i, img) in chunk.iter().enumerate() {
            batch
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&img.pixels);
        }
        let logits = model.logits_batch(batch.view());
        out.slice_mut(ndarray::s![row..row + chunk.len(), ..])
            .assign(&logits);
        row += chunk.len();
    }
    out
}

fn ce_losses(model: &dyn Model, images: &[Image], labels: &[usize]) -> Vec<f64> {
    let logits = logits_images(model, images);
    let logp = layers::log_softmax(logits.view());
    labels
        .iter()
        .enumerate()
        .map(|(row, &l)| -logp[[row, l]] as f64)
        .collect()
}

fn true_class_confidences(model: &dyn Model, images: &[Image], labels: &[usize]) -> Vec<f64> {
    let logits = logits_images(model, images);
    let probs = layers::softmax(logits.view());
    labels
        .iter()
        .enumerate()
        .map(|(row, &l)| probs[[row, l]] as f64)
        .collect()
}

/// VSR probe for patch-trigger identifiers.
///
/// Targeted: fraction of non-target-class test samples whose triggered
/// prediction equals the target. Untargeted: fraction of clean-correct test
/// samples whose triggered prediction flips away from the true label.
pub fn verify_backdoor(
    model: &dyn Model,
    test: &LabeledDataset,
    m: &VerificationMaterials,
) -> Result<VerificationReport> {
    let trigger = m
        .trigger
        .as_ref()
        .ok_or_else(|| Error::Precondition("materials carry no trigger".into()))?;
    match m.method {
        DovMethod::Badnets => {
            let target = m
                .target_class
                .ok_or_else(|| Error::Precondition("materials carry no target class".into()))?;
            let keep: Vec<usize> = (0..test.len())
                .filter(|&i| test.labels[i] != target)
                .collect();
            let triggered: Vec<Image> = keep
                .iter()
                .map(|&i| trigger.apply(&test.images[i]))
                .collect();
            let preds = predict_images(model, &triggered);
            let hits = preds.iter().filter(|&&p| p == target).count();
            let vsr = hits as f64 / keep.len().max(1) as f64;
            Ok(VerificationReport::new(
                m.method.as_str(),
                MetricKind::Vsr,
                vsr,
                keep.len(),
            ))
        }
        DovMethod::Ubw => {
            let clean_preds = predict_images(model, &test.images);
            let keep: Vec<usize> = (0..test.len())
                .filter(|&i| clean_preds[i] == test.labels[i])
                .collect();
            let triggered: Vec<Image> = keep
                .iter()
                .map(|&i| trigger.apply(&test.images[i]))
                .collect();
            let preds = predict_images(model, &triggered);
            let flips = preds
                .iter()
                .zip(keep.iter())
                .filter(|(p, &i)| **p != test.labels[i])
                .count();
            let vsr = flips as f64 / keep.len().max(1) as f64;
            Ok(VerificationReport::new(
                m.method.as_str(),
                MetricKind::Vsr,
                vsr,
                keep.len(),
            ))
        }
        other => Err(Error::Precondition(format!(
            "verify_backdoor does not handle {other:?}"
        ))),
    }
}

/// Hypothesis-test probe for non-poisoning identifiers.
///
/// Isotope-style: true-class confidence under the key blend against blends
/// with seeded decoy images. Hue marking: loss under the secret shift
/// against other random shifts. One-tailed, identifier condition favored.
pub fn verify_nonpoisoning(
    model: &dyn Model,
    test: &LabeledDataset,
    m: &VerificationMaterials,
    decoy_pool: &LabeledDataset,
    n_decoys: usize,
    seed: u64,
) -> Result<VerificationReport> {
    if n_decoys == 0 {
        return Err(Error::Precondition("need at least one decoy".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = match m.method {
        DovMethod::Isotope => {
            if decoy_pool.is_empty() {
                return Err(Error::Precondition("decoy pool is empty".into()));
            }
            let key = m
                .key_image
                .as_ref()
                .ok_or_else(|| Error::Precondition("materials carry no key image".into()))?;
            let ratio = m
                .blend_ratio
                .ok_or_else(|| Error::Precondition("materials carry no blend ratio".into()))?;
            let keyed: Vec<Image> = test
                .images
                .iter()
                .map(|img| blend_with(img, key, ratio))
                .collect();
            let key_conf = true_class_confidences(model, &keyed, &test.labels);
            let mut decoy_conf = Vec::with_capacity(n_decoys * test.len());
            for _ in 0..n_decoys {
                let decoy = &decoy_pool.images[rng.gen_range(0..decoy_pool.len())];
                let blended: Vec<Image> = test
                    .images
                    .iter()
                    .map(|img| blend_with(img, decoy, ratio))
                    .collect();
                decoy_conf.extend(true_class_confidences(model, &blended, &test.labels));
            }
            welch_one_tailed(&key_conf, &decoy_conf, Alternative::AGreater)?
        }
        DovMethod::Anw => {
            let shift = m
                .hue_shift
                .ok_or_else(|| Error::Precondition("materials carry no hue shift".into()))?;
            let shifted: Vec<Image> = test
                .images
                .iter()
                .map(|img| hue_rotate(img, shift))
                .collect();
            let secret_losses = ce_losses(model, &shifted, &test.labels);
            let mut decoy_losses = Vec::with_capacity(n_decoys * test.len());
            for _ in 0..n_decoys {
                let angle = rng.gen_range(1.0..359.0f32);
                let rotated: Vec<Image> = test
                    .images
                    .iter()
                    .map(|img| hue_rotate(img, angle))
                    .collect();
                decoy_losses.extend(ce_losses(model, &rotated, &test.labels));
            }
            welch_one_tailed(&secret_losses, &decoy_losses, Alternative::BGreater)?
        }
        other => {
            return Err(Error::Precondition(format!(
                "verify_nonpoisoning does not handle {other:?}"
            )))
        }
    };
    let mut report =
        VerificationReport::new(m.method.as_str(), MetricKind::PValue, p, test.len());
    report.seeds.push(seed);
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct FingerprintOutcome {
    pub report: VerificationReport,
    /// mean(heldout loss) / mean(train loss)
    pub loss_ratio: f64,
}

/// Train/heldout loss-gap fingerprint: one-tailed test that heldout losses
/// exceed train-probe losses.
pub fn verify_fingerprint(
    model: &dyn Model,
    train_probe: &LabeledDataset,
    heldout_probe: &LabeledDataset,
) -> Result<FingerprintOutcome> {
    if train_probe.len() != heldout_probe.len() {
        return Err(Error::Precondition("probes must be the same size".into()));
    }
    if train_probe.len() < 2 {
        return Err(Error::Precondition(
            "probes of size < 2 cannot support the test".into(),
        ));
    }
    let overlap = train_probe
        .ids
        .iter()
        .any(|id| heldout_probe.ids.contains(id));
    if overlap {
        return Err(Error::Precondition("probe id sets overlap".into()));
    }
    let train_losses = ce_losses(model, &train_probe.images, &train_probe.labels);
    let heldout_losses = ce_losses(model, &heldout_probe.images, &heldout_probe.labels);
    let p = welch_one_tailed(&train_losses, &heldout_losses, Alternative::BGreater)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let loss_ratio = mean(&heldout_losses) / mean(&train_losses).max(1e-12);
    let report = VerificationReport::new(
        DovMethod::Fingerprint.as_str(),
        MetricKind::PValue,
        p,
        train_probe.len() + heldout_probe.len(),
    );
    Ok(FingerprintOutcome { report, loss_ratio })
}

// ---------------------------------------------------------------------------
// JSON serialization: tensors as base64 of the packed layout (LE u32 dims
// then quantized bytes), everything else plain JSON.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorJson {
    dims: Vec<u32>,
    b64: String,
}

fn encode_tensor(dims: &[u32], bytes: &[u8]) -> TensorJson {
    let mut packed = Vec::with_capacity(4 * dims.len() + bytes.len());
    for d in dims {
        packed.extend_from_slice(&d.to_le_bytes());
    }
    packed.extend_from_slice(bytes);
    TensorJson {
        dims: dims.to_vec(),
        b64: base64::engine::general_purpose::STANDARD.encode(packed),
    }
}

fn decode_tensor(t: &TensorJson) -> Result<Vec<u8>> {
    let packed = base64::engine::general_purpose::STANDARD
        .decode(&t.b64)
        .map_err(|e| Error::Format(format!("bad base64 tensor: {e}")))?;
    let header = 4 * t.dims.len();
    if packed.len() < header {
        return Err(Error::Format("tensor payload shorter than header".into()));
    }
    for (i, d) in t.dims.iter().enumerate() {
        let got = u32::from_le_bytes(packed[4 * i..4 * i + 4].try_into().unwrap());
        if got != *d {
            return Err(Error::Format("tensor header dims disagree".into()));
        }
    }
    Ok(packed[header..].to_vec())
}

#[derive(Serialize, Deserialize)]
struct MaterialsJson {
    method: DovMethod,
    #[serde(skip_serializing_if = "Option::is_none")]
    trigger_patch: Option<TensorJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trigger_mask: Option<TensorJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trigger_position: Option<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hue_shift: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    key_image: Option<TensorJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    blend_ratio: Option<f32>,
    marked_ids: Vec<u64>,
    train_probe_ids: Vec<u64>,
    heldout_probe_ids: Vec<u64>,
}

impl VerificationMaterials {
    pub fn to_json(&self) -> Result<String> {
        let trigger_patch = self.trigger.as_ref().map(|t| {
            let s = t.patch.shape();
            let bytes: Vec<u8> = t
                .patch
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            encode_tensor(&[s[0] as u32, s[1] as u32, s[2] as u32], &bytes)
        });
        let trigger_mask = self.trigger.as_ref().map(|t| {
            let s = t.mask.shape();
            let bytes: Vec<u8> = t.mask.iter().map(|&v| if v >= 0.5 { 1 } else { 0 }).collect();
            encode_tensor(&[s[0] as u32, s[1] as u32], &bytes)
        });
        let key_image = self.key_image.as_ref().map(|img| {
            let (c, h, w) = img.shape();
            encode_tensor(&[c as u32, h as u32, w as u32], &img.to_u8())
        });
        let doc = MaterialsJson {
            method: self.method,
            trigger_patch,
            trigger_mask,
            trigger_position: self.trigger.as_ref().map(|t| t.position),
            target_class: self.target_class,
            hue_shift: self.hue_shift,
            key_image,
            blend_ratio: self.blend_ratio,
            marked_ids: self.marked_ids.iter().copied().collect(),
            train_probe_ids: self.train_probe_ids.iter().copied().collect(),
            heldout_probe_ids: self.heldout_probe_ids.iter().copied().collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let doc: MaterialsJson = serde_json::from_str(json)?;
        let trigger = match (&doc.trigger_patch, &doc.trigger_mask, doc.trigger_position) {
            (Some(p), Some(m), Some(pos)) => {
                let pb = decode_tensor(p)?;
                let mb = decode_tensor(m)?;
                let pd: Vec<usize> = p.dims.iter().map(|&d| d as usize).collect();
                let md: Vec<usize> = m.dims.iter().map(|&d| d as usize).collect();
                let patch = Array3::from_shape_vec(
                    (pd[0], pd[1], pd[2]),
                    pb.iter().map(|&b| b as f32 / 255.0).collect(),
                )
                .map_err(|e| Error::Format(format!("trigger patch: {e}")))?;
                let mask = Array2::from_shape_vec(
                    (md[0], md[1]),
                    mb.iter().map(|&b| b as f32).collect(),
                )
                .map_err(|e| Error::Format(format!("trigger mask: {e}")))?;
                Some(TriggerPattern {
                    patch,
                    mask,
                    position: pos,
                })
            }
            (None, None, None) => None,
            _ => return Err(Error::Format("partial trigger in materials".into())),
        };
        let key_image = match &doc.key_image {
            Some(t) => {
                let bytes = decode_tensor(t)?;
                let d: Vec<usize> = t.dims.iter().map(|&x| x as usize).collect();
                Some(Image::from_u8(&bytes, d[0], d[1], d[2])?)
            }
            None => None,
        };
        Ok(VerificationMaterials {
            method: doc.method,
            trigger,
            target_class: doc.target_class,
            hue_shift: doc.hue_shift,
            key_image,
            blend_ratio: doc.blend_ratio,
            marked_ids: doc.marked_ids.into_iter().collect(),
            train_probe_ids: doc.train_probe_ids.into_iter().collect(),
            heldout_probe_ids: doc.heldout_probe_ids.into_iter().collect(),
        })
    }
}

/// Exhaustive per-sample VSR count (independent of the batched path); used
/// as the counting oracle on small fixtures.
pub fn vsr_counting_oracle(preds: &[usize], eligible_truths: &[usize], target: Option<usize>) -> f64 {
    assert_eq!(preds.len(), eligible_truths.len());
    let mut hits = 0usize;
    for (p, t) in preds.iter().zip(eligible_truths) {
        let hit = match target {
            Some(tc) => *p == tc,
            None => *p != *t,
        };
        if hit {
            hits += 1;
        }
    }
    hits as f64 / preds.len().max(1) as f64
}
