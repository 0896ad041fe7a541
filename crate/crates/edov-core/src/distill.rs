//! Offline perturbation pool, corruption-chain search, and selective
//! knowledge transfer.
//!
//! Perturbations are universal deltas grown by mini-batch ascent on the
//! teacher's loss (L2-rescaled each batch, then projected per iteration
//! onto whichever of L0/L2/Linf keeps the loss highest on a held-out
//! batch). Corruption chains are short sequences of parameterized image
//! corruptions found by a single-objective GA with tournament selection
//! and elitism. Distillation minimizes KL between temperature-scaled
//! teacher logits on clean inputs and student logits on transformed ones.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::color;
use crate::data::{Image, LabeledDataset};
use crate::dov::MarkedDataset;
use crate::error::{Error, Result};
use crate::model::{Classifier, LossKind, Model, Net};
use crate::par;

pub const POOL_MAGIC: &[u8; 8] = b"EDOVPP01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormTag {
    L0,
    L2,
    Linf,
}

impl NormTag {
    fn to_u8(self) -> u8 {
        match self {
            NormTag::L0 => 0,
            NormTag::L2 => 1,
            NormTag::Linf => 2,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(NormTag::L0),
            1 => Ok(NormTag::L2),
            2 => Ok(NormTag::Linf),
            other => Err(Error::Format(format!("bad norm tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budgets {
    /// Elements kept by the L0 projection.
    pub k0: usize,
    pub eps2: f32,
    pub epsinf: f32,
}

#[derive(Debug, Clone)]
pub struct Perturbation {
    pub delta: Array3<f32>,
    pub norm_tag: NormTag,
    pub budgets: Budgets,
}

/// Project a delta onto one norm ball.
pub fn project_norm(delta: &Array3<f32>, norm: NormTag, budgets: &Budgets) -> Array3<f32> {
    match norm {
        NormTag::Linf => delta.mapv(|v| v.clamp(-budgets.epsinf, budgets.epsinf)),
        NormTag::L2 => {
            let n: f64 = delta.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if n <= budgets.eps2 as f64 || n == 0.0 {
                delta.clone()
            } else {
                let s = (budgets.eps2 as f64 / n) as f32;
                delta.mapv(|v| v * s)
            }
        }
        NormTag::L0 => {
            let mut order: Vec<usize> = (0..delta.len()).collect();
            let flat: Vec<f32> = delta.iter().copied().collect();
            order.sort_by(|&a, &b| {
                flat[b]
                    .abs()
                    .partial_cmp(&flat[a].abs())
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let keep = budgets.k0.min(flat.len());
            let mut out = vec![0.0f32; flat.len()];
            for &i in order.iter().take(keep) {
                out[i] = flat[i];
            }
            Array3::from_shape_vec(delta.raw_dim(), out).unwrap()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PoolGenConfig {
    /// Ascent iterations (passes over the sampled batches).
    pub iterations: usize,
    pub learning_rate: f32,
    /// L2 rescale target applied after every batch update.
    pub scale: f32,
    /// Weight of the -lambda * ||delta||^2 regularizer.
    pub reg: f32,
    pub batch_size: usize,
    /// Cap on batches per iteration (None walks the whole dataset).
    pub batches_per_iter: Option<usize>,
    pub k0: usize,
    pub eps2: f32,
    pub epsinf: f32,
    /// Ascend on ground-truth labels instead of teacher pseudo-labels.
    pub ascend_on_true_labels: bool,
}

impl Default for PoolGenConfig {
    fn default() -> Self {
        PoolGenConfig {
            iterations: 5,
            learning_rate: 1.0,
            scale: 2.0,
            reg: 1e-3,
            batch_size: 128,
            batches_per_iter: None,
            k0: 0, // filled from image size when 0
            eps2: 2.0,
            epsinf: 16.0 / 255.0,
            ascend_on_true_labels: false,
        }
    }
}

impl PoolGenConfig {
    fn budgets_for(&self, shape: (usize, usize, usize)) -> Budgets {
        let elems = shape.0 * shape.1 * shape.2;
        let k0 = if self.k0 == 0 {
            ((elems as f64) * 0.02).ceil() as usize
        } else {
            self.k0
        };
        Budgets {
            k0: k0.max(1),
            eps2: self.eps2,
            epsinf: self.epsinf,
        }
    }
}

fn teacher_pseudo_labels(teacher: &Classifier, x: &Array4<f32>) -> Vec<usize> {
    teacher.predict_batch(x.view())
}

/// Mean input-gradient ascent for one universal delta (seeded).
pub fn generate_perturbation(
    teacher: &Classifier,
    d: &MarkedDataset,
    cfg: &PoolGenConfig,
    seed: u64,
) -> Result<Perturbation> {
    let ds = &d.dataset;
    if ds.is_empty() {
        return Err(Error::Precondition("empty dataset".into()));
    }
    if cfg.learning_rate <= 0.0 || cfg.scale <= 0.0 {
        return Err(Error::Precondition(
            "perturbation config must be positive".into(),
        ));
    }
    let shape = ds.shape();
    let budgets = cfg.budgets_for(shape);
    let mut delta = Array3::<f32>::zeros(shape);
    let mut tag = NormTag::L2;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Held-out batch for the per-iteration projection choice.
    let eval_count = cfg.batch_size.min(ds.len());
    let eval_positions = rand::seq::index::sample(&mut rng, ds.len(), eval_count).into_vec();
    let eval_x = ds.gather_batch(&eval_positions);
    let eval_labels: Vec<usize> = if cfg.ascend_on_true_labels {
        eval_positions.iter().map(|&i| ds.labels[i]).collect()
    } else {
        teacher_pseudo_labels(teacher, &eval_x)
    };

    let mut order: Vec<usize> = (0..ds.len()).collect();
    for _iter in 0..cfg.iterations {
        order.shuffle(&mut rng);
        let max_batches = cfg.batches_per_iter.unwrap_or(usize::MAX);
        for batch in order.chunks(cfg.batch_size).take(max_batches) {
            let x = ds.gather_batch(batch);
            let labels: Vec<usize> = if cfg.ascend_on_true_labels {
                batch.iter().map(|&i| ds.labels[i]).collect()
            } else {
                teacher_pseudo_labels(teacher, &x)
            };
            let mut x_pert = &x + &delta.view().insert_axis(ndarray::Axis(0));
            // Keep the clip mask before clamping: gradients vanish outside.
            let mask = x_pert.mapv(|v| if (0.0..=1.0).contains(&v) { 1.0f32 } else { 0.0 });
            x_pert.mapv_inplace(|v| v.clamp(0.0, 1.0));

            let out = teacher.net().loss_and_grad(
                x_pert.view(),
                &LossKind::HardCe { labels: &labels },
                false,
                true,
            );
            let mean_loss = out.loss_sum / batch.len() as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Diverged("perturbation ascent".into()));
            }
            let g = out.input_grad.unwrap() * &mask;
            // Sum of per-sample normalized grads = gradient of the mean loss.
            let mut step = Array3::<f32>::zeros(shape);
            for row in 0..batch.len() {
                step += &g.index_axis(ndarray::Axis(0), row);
            }
            // d/d_delta of (CE - reg * ||delta||^2)
            ndarray::Zip::from(&mut delta).and(&step).for_each(|dv, &sv| {
                *dv += cfg.learning_rate * (sv - 2.0 * cfg.reg * *dv);
            });
            // Per-batch L2 rescale preserves the update direction.
            let n: f64 = delta.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if n > cfg.scale as f64 {
                let s = (cfg.scale as f64 / n) as f32;
                delta.mapv_inplace(|v| v * s);
            }
        }

        // Keep the projection that maximizes held-out loss.
        let mut best_loss = f64::NEG_INFINITY;
        let mut best: Option<(Array3<f32>, NormTag)> = None;
        for cand_tag in [NormTag::L0, NormTag::L2, NormTag::Linf] {
            let cand = project_norm(&delta, cand_tag, &budgets);
            let mut xp = &eval_x + &cand.view().insert_axis(ndarray::Axis(0));
            xp.mapv_inplace(|v| v.clamp(0.0, 1.0));
            let out = teacher.net().loss_and_grad(
                xp.view(),
                &LossKind::HardCe {
                    labels: &eval_labels,
                },
                false,
                false,
            );
            let loss = out.loss_sum / eval_count as f64;
            if loss > best_loss {
                best_loss = loss;
                best = Some((cand, cand_tag));
            }
        }
        if let Some((cand, cand_tag)) = best {
            delta = cand;
            tag = cand_tag;
        }
    }

    Ok(Perturbation {
        delta,
        norm_tag: tag,
        budgets,
    })
}

#[derive(Debug, Clone)]
pub struct PerturbationPool {
    pub members: Vec<Perturbation>,
    pub config: PoolGenConfig,
}

/// N independent ascents with seeds seed..seed+N-1.
pub fn build_perturbation_pool(
    teacher: &Classifier,
    d: &MarkedDataset,
    n: usize,
    cfg: &PoolGenConfig,
    seed: u64,
) -> Result<PerturbationPool> {
    if n == 0 {
        return Err(Error::Precondition("pool needs at least one member".into()));
    }
    let members: Result<Vec<Perturbation>> = par::map_range(n, |i| {
        generate_perturbation(teacher, d, cfg, seed + i as u64)
    })
    .into_iter()
    .collect();
    Ok(PerturbationPool {
        members: members?,
        config: cfg.clone(),
    })
}

impl PerturbationPool {
    /// Layout: magic, u32 N, then per member u8 norm tag, f32 k0/eps2/epsinf,
    /// u32 C,H,W, and the f32 payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
        put(POOL_MAGIC)?;
        put(&(self.members.len() as u32).to_le_bytes())?;
        for m in &self.members {
            put(&[m.norm_tag.to_u8()])?;
            put(&(m.budgets.k0 as f32).to_le_bytes())?;
            put(&m.budgets.eps2.to_le_bytes())?;
            put(&m.budgets.epsinf.to_le_bytes())?;
            let s = m.delta.shape();
            for d in [s[0], s[1], s[2]] {
                put(&(d as u32).to_le_bytes())?;
            }
            for &v in m.delta.iter() {
                put(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PerturbationPool> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != POOL_MAGIC {
            return Err(Error::Format(format!("{}: bad pool magic", path.display())));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
        let n = u32::from_le_bytes(b4) as usize;
        let mut members = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b1 = [0u8; 1];
            r.read_exact(&mut b1).map_err(|e| Error::io(path, e))?;
            let tag = NormTag::from_u8(b1[0])?;
            let read_f32 = |r: &mut BufReader<File>| -> Result<f32> {
                let mut b = [0u8; 4];
                r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
                Ok(f32::from_le_bytes(b))
            };
            let k0 = read_f32(&mut r)? as usize;
            let eps2 = read_f32(&mut r)?;
            let epsinf = read_f32(&mut r)?;
            let mut dims = [0usize; 3];
            for d in dims.iter_mut() {
                r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
                *d = u32::from_le_bytes(b4) as usize;
            }
            let len = dims[0] * dims[1] * dims[2];
            let mut payload = Vec::with_capacity(len);
            for _ in 0..len {
                r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
                payload.push(f32::from_le_bytes(b4));
            }
            members.push(Perturbation {
                delta: Array3::from_shape_vec((dims[0], dims[1], dims[2]), payload).unwrap(),
                norm_tag: tag,
                budgets: Budgets { k0, eps2, epsinf },
            });
        }
        Ok(PerturbationPool {
            members,
            config: PoolGenConfig::default(),
        })
    }
}

// ---------------------------------------------------------------------------
// Corruptions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionId {
    GaussianNoise,
    ImpulseNoise,
    ShotNoise,
    GaussianBlur,
    Brightness,
    Contrast,
    Saturate,
    Pixelate,
    Identity,
}

/// The default searchable registry (identity excluded).
pub const DEFAULT_REGISTRY: [CorruptionId; 8] = [
    CorruptionId::GaussianNoise,
    CorruptionId::ImpulseNoise,
    CorruptionId::ShotNoise,
    CorruptionId::GaussianBlur,
    CorruptionId::Brightness,
    CorruptionId::Contrast,
    CorruptionId::Saturate,
    CorruptionId::Pixelate,
];

/// Additive brightness constants, severity 1..=5.
pub const BRIGHTNESS_DELTAS: [f32; 5] = [0.05, 0.10, 0.15, 0.22, 0.30];
const GAUSS_SIGMA: [f32; 5] = [0.04, 0.07, 0.10, 0.14, 0.18];
const IMPULSE_P: [f64; 5] = [0.02, 0.04, 0.07, 0.10, 0.14];
const SHOT_SCALE: [f64; 5] = [60.0, 35.0, 20.0, 12.0, 7.0];
const BLUR_SIGMA: [f32; 5] = [0.5, 0.8, 1.1, 1.5, 2.0];
const CONTRAST_F: [f32; 5] = [0.85, 0.70, 0.55, 0.42, 0.30];
const SATURATE_F: [f32; 5] = [1.3, 1.6, 2.0, 2.5, 3.0];
const PIXELATE_F: [f32; 5] = [0.70, 0.55, 0.45, 0.35, 0.25];

fn severity_index(severity: u8) -> Result<usize> {
    if (1..=5).contains(&severity) {
        Ok(severity as usize - 1)
    } else {
        Err(Error::Precondition(format!(
            "severity must be 1..=5, got {severity}"
        )))
    }
}

fn apply_one(img: &Image, id: CorruptionId, severity: u8, rng: &mut ChaCha8Rng) -> Result<Image> {
    let si = severity_index(severity)?;
    let (c, h, w) = img.shape();
    let out = match id {
        CorruptionId::Identity => img.clone(),
        CorruptionId::GaussianNoise => {
            let normal = Normal::new(0.0f64, GAUSS_SIGMA[si] as f64).unwrap();
            let pixels = img
                .pixels
                .mapv(|v| (v + normal.sample(rng) as f32).clamp(0.0, 1.0));
            Image {
                pixels,
                eight_bit_source: img.eight_bit_source,
            }
        }
        CorruptionId::ImpulseNoise => {
            let mut px = img.pixels.clone();
            for y in 0..h {
                for x in 0..w {
                    if rng.gen_bool(IMPULSE_P[si]) {
                        let v = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                        for ch in 0..c {
                            px[[ch, y, x]] = v;
                        }
                    }
                }
            }
            Image {
                pixels: px,
                eight_bit_source: img.eight_bit_source,
            }
        }
        CorruptionId::ShotNoise => {
            let scale = SHOT_SCALE[si];
            let pixels = img.pixels.mapv(|v| {
                let lambda = (v as f64) * scale;
                let sample = if lambda > 0.0 {
                    Poisson::new(lambda).unwrap().sample(rng)
                } else {
                    0.0
                };
                ((sample / scale) as f32).clamp(0.0, 1.0)
            });
            Image {
                pixels,
                eight_bit_source: img.eight_bit_source,
            }
        }
        CorruptionId::GaussianBlur => gaussian_blur(img, BLUR_SIGMA[si]),
        CorruptionId::Brightness => Image {
            pixels: img.pixels.mapv(|v| (v + BRIGHTNESS_DELTAS[si]).clamp(0.0, 1.0)),
            eight_bit_source: img.eight_bit_source,
        },
        CorruptionId::Contrast => {
            let mean = img.pixels.iter().copied().sum::<f32>() / img.pixels.len() as f32;
            Image {
                pixels: img
                    .pixels
                    .mapv(|v| (mean + CONTRAST_F[si] * (v - mean)).clamp(0.0, 1.0)),
                eight_bit_source: img.eight_bit_source,
            }
        }
        CorruptionId::Saturate => {
            if c != 3 {
                return Err(Error::Precondition("saturate needs RGB".into()));
            }
            color::saturate(img, SATURATE_F[si])
        }
        CorruptionId::Pixelate => {
            let nh = ((h as f32 * PIXELATE_F[si]).round() as usize).max(1);
            let nw = ((w as f32 * PIXELATE_F[si]).round() as usize).max(1);
            let mut px = Array3::zeros((c, h, w));
            for y in 0..h {
                for x in 0..w {
                    let sy = (y * nh / h).min(nh - 1);
                    let sx = (x * nw / w).min(nw - 1);
                    // Nearest source pixel of the downscaled grid.
                    let oy = (sy * h + h / 2) / nh;
                    let ox = (sx * w + w / 2) / nw;
                    for ch in 0..c {
                        px[[ch, y, x]] = img.pixels[[ch, oy.min(h - 1), ox.min(w - 1)]];
                    }
                }
            }
            Image {
                pixels: px,
                eight_bit_source: img.eight_bit_source,
            }
        }
    };
    Ok(out)
}

fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let (c, h, w) = img.shape();
    let radius = (2.5 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0f32;
    for i in -radius..=radius {
        let v = (-(i * i) as f32 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in kernel.iter_mut() {
        *v /= sum;
    }
    let clamp_h = |v: isize| v.clamp(0, h as isize - 1) as usize;
    let clamp_w = |v: isize| v.clamp(0, w as isize - 1) as usize;
    let mut tmp = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = clamp_w(x as isize + ki as isize - radius);
                    acc += kv * img.pixels[[ch, y, sx]];
                }
                tmp[[ch, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = clamp_h(y as isize + ki as isize - radius);
                    acc += kv * tmp[[ch, sy, x]];
                }
                out[[ch, y, x]] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Image {
        pixels: out,
        eight_bit_source: img.eight_bit_source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub struct ChainStep {
    pub corruption_id: CorruptionId,
    pub severity: u8,
}

/// Ordered corruption sequence. The first step is the outermost
/// application: steps apply back to front.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub struct CorruptionChain {
    pub steps: Vec<ChainStep>,
}

impl CorruptionChain {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(&self.steps)?)
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(CorruptionChain {
            steps: serde_json::from_slice(&bytes)?,
        })
    }

    fn content_seed(&self) -> u64 {
        let mut acc: u64 = 0xcbf29ce484222325;
        for s in &self.steps {
            acc ^= s.corruption_id as u64 + 1;
            acc = acc.wrapping_mul(0x100000001b3);
            acc ^= s.severity as u64;
            acc = acc.wrapping_mul(0x100000001b3);
        }
        acc
    }
}

/// Apply the chain with seeded stochastic corruptions; last step first.
pub fn apply_corruption(img: &Image, chain: &CorruptionChain, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = img.clone();
    for step in chain.steps.iter().rev() {
        cur = apply_one(&cur, step.corruption_id, step.severity, &mut rng)?;
    }
    Ok(cur)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GaConfig {
    pub population: usize,
    pub epochs: usize,
    pub chain_len: usize,
    pub mutation_rate: f64,
    pub tournament: usize,
    pub batch_size: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population: 20,
            epochs: 10,
            chain_len: 3,
            mutation_rate: 0.25,
            tournament: 3,
            batch_size: 256,
        }
    }
}

const ELITES: usize = 2;

fn random_chain(registry: &[CorruptionId], len: usize, rng: &mut ChaCha8Rng) -> CorruptionChain {
    CorruptionChain {
        steps: (0..len)
            .map(|_| ChainStep {
                corruption_id: registry[rng.gen_range(0..registry.len())],
                severity: rng.gen_range(1..=5),
            })
            .collect(),
    }
}

/// Mean teacher cross-entropy on a corrupted copy of the evaluation batch,
/// with corruption randomness keyed on the chain content.
pub fn chain_fitness(
    teacher: &dyn Model,
    images: &[Image],
    labels: &[usize],
    chain: &CorruptionChain,
    seed: u64,
) -> Result<f64> {
    let base = seed ^ chain.content_seed();
    let corrupted: Result<Vec<Image>> = par::map_range(images.len(), |i| {
        apply_corruption(&images[i], chain, base.wrapping_add(i as u64))
    })
    .into_iter()
    .collect();
    let corrupted = corrupted?;
    let (c, h, w) = corrupted[0].shape();
    let mut losses = 0.0f64;
    for (chunk_imgs, chunk_labels) in corrupted.chunks(256).zip(labels.chunks(256)) {
        let mut batch = Array4::zeros((chunk_imgs.len(), c, h, w));
        for (i, img) in chunk_imgs.iter().enumerate() {
            batch
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&img.pixels);
        }
        let logits = teacher.logits_batch(batch.view());
        let logp = crate::model::layers::log_softmax(logits.view());
        for (row, &l) in chunk_labels.iter().enumerate() {
            losses -= logp[[row, l]] as f64;
        }
    }
    Ok(losses / images.len() as f64)
}

/// Single-objective GA over corruption chains, maximizing teacher loss on a
/// seeded batch with ground-truth labels.
pub fn search_corruption_chain(
    teacher: &dyn Model,
    d: &MarkedDataset,
    registry: &[CorruptionId],
    cfg: &GaConfig,
    seed: u64,
) -> Result<CorruptionChain> {
    if registry.is_empty() {
        return Err(Error::Precondition("corruption registry is empty".into()));
    }
    if cfg.population == 0 || cfg.chain_len == 0 {
        return Err(Error::Precondition("GA needs population and length".into()));
    }
    let ds = &d.dataset;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval_n = cfg.batch_size.min(ds.len());
    let positions = rand::seq::index::sample(&mut rng, ds.len(), eval_n).into_vec();
    let images: Vec<Image> = positions.iter().map(|&i| ds.images[i].clone()).collect();
    let labels: Vec<usize> = positions.iter().map(|&i| ds.labels[i]).collect();

    let mut population: Vec<CorruptionChain> = (0..cfg.population)
        .map(|_| random_chain(registry, cfg.chain_len, &mut rng))
        .collect();
    // A neutral individual anchors the search when identity is available.
    if registry.contains(&CorruptionId::Identity) {
        population[0] = CorruptionChain {
            steps: vec![
                ChainStep {
                    corruption_id: CorruptionId::Identity,
                    severity: 1,
                };
                cfg.chain_len
            ],
        };
    }

    let eval_all = |pop: &[CorruptionChain]| -> Result<Vec<f64>> {
        pop.iter()
            .map(|chain| chain_fitness(teacher, &images, &labels, chain, seed))
            .collect()
    };
    let mut fitness = eval_all(&population)?;

    for _epoch in 0..cfg.epochs {
        let mut ranked: Vec<usize> = (0..population.len()).collect();
        ranked.sort_by(|&a, &b| fitness[b].partial_cmp(&fitness[a]).unwrap());
        let mut next: Vec<CorruptionChain> = ranked
            .iter()
            .take(ELITES.min(population.len()))
            .map(|&i| population[i].clone())
            .collect();
        while next.len() < cfg.population {
            let pick = |rng: &mut ChaCha8Rng| -> usize {
                let mut best = rng.gen_range(0..population.len());
                for _ in 1..cfg.tournament.max(1) {
                    let cand = rng.gen_range(0..population.len());
                    if fitness[cand] > fitness[best] {
                        best = cand;
                    }
                }
                best
            };
            let pa = pick(&mut rng);
            let pb = pick(&mut rng);
            let cut = if cfg.chain_len > 1 {
                rng.gen_range(1..cfg.chain_len)
            } else {
                0
            };
            let mut child: Vec<ChainStep> = population[pa].steps[..cut].to_vec();
            child.extend_from_slice(&population[pb].steps[cut..]);
            for gene in child.iter_mut() {
                if rng.gen_bool(cfg.mutation_rate) {
                    gene.corruption_id = registry[rng.gen_range(0..registry.len())];
                    gene.severity = rng.gen_range(1..=5);
                }
            }
            next.push(CorruptionChain { steps: child });
        }
        population = next;
        fitness = eval_all(&population)?;
    }

    let best = (0..population.len())
        .max_by(|&a, &b| fitness[a].partial_cmp(&fitness[b]).unwrap())
        .unwrap();
    Ok(population[best].clone())
}

// ---------------------------------------------------------------------------
// Selective knowledge transfer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SktConfig {
    pub tau: f32,
    /// (skip, perturb, corrupt) sampling probabilities; must sum to 1.
    pub op_probs: (f64, f64, f64),
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for SktConfig {
    fn default() -> Self {
        SktConfig {
            tau: 1.0,
            op_probs: (0.5, 0.25, 0.25),
            epochs: 10,
            batch_size: 128,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

impl SktConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Precondition("temperature must be positive".into()));
        }
        let (a, b, c) = self.op_probs;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(
                "op probabilities must be non-negative and sum to 1".into(),
            ));
        }
        if self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::Precondition("bad distillation hyperparameters".into()));
        }
        Ok(())
    }
}

const MOMENTUM: f32 = 0.9;

enum Op {
    Skip,
    Perturb(usize),
    Corrupt(u64),
}

fn draw_op(cfg: &SktConfig, pool_len: usize, rng: &mut ChaCha8Rng) -> Op {
    let u: f64 = rng.gen_range(0.0..1.0);
    let (p_skip, p_perturb, _) = cfg.op_probs;
    if u < p_skip {
        Op::Skip
    } else if u < p_skip + p_perturb {
        if pool_len == 0 {
            Op::Skip
        } else {
            Op::Perturb(rng.gen_range(0..pool_len))
        }
    } else {
        Op::Corrupt(rng.gen())
    }
}

/// Distill teacher into a fresh student over the transfer set. Teacher
/// logits always come from the clean inputs; the student sees the
/// transformed ones.
pub fn distill_selective(
    teacher: &Classifier,
    student_init: &Classifier,
    transfer: &LabeledDataset,
    pool: &PerturbationPool,
    chain: &CorruptionChain,
    cfg: &SktConfig,
) -> Result<Classifier> {
    cfg.validate()?;
    if transfer.is_empty() {
        return Err(Error::Precondition("transfer set is empty".into()));
    }
    if teacher.k != student_init.k || teacher.in_channels != student_init.in_channels {
        return Err(Error::Precondition(
            "teacher/student class or channel mismatch".into(),
        ));
    }
    if teacher.architecture_id == student_init.architecture_id
        && teacher.params == student_init.params
    {
        return Err(Error::Precondition(
            "student must start from an independent initialization".into(),
        ));
    }
    let mut student = student_init.clone();
    let n = transfer.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut velocity = vec![0.0f32; student.params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(cfg.learning_rate, step, total_steps);
            let x = transfer.gather_batch(batch);
            let teacher_logits = teacher.net().logits(x.view());

            let x_student = match draw_op(cfg, pool.members.len(), &mut rng) {
                Op::Skip => x,
                Op::Perturb(idx) => {
                    let delta = &pool.members[idx].delta;
                    let mut xp = &x + &delta.view().insert_axis(ndarray::Axis(0));
                    xp.mapv_inplace(|v| v.clamp(0.0, 1.0));
                    xp
                }
                Op::Corrupt(cseed) => {
                    let imgs: Result<Vec<Image>> = par::map_range(batch.len(), |i| {
                        apply_corruption(
                            &transfer.images[batch[i]],
                            chain,
                            cseed.wrapping_add(i as u64),
                        )
                    })
                    .into_iter()
                    .collect();
                    let imgs = imgs?;
                    let (c, h, w) = transfer.shape();
                    let mut xb = Array4::zeros((batch.len(), c, h, w));
                    for (i, img) in imgs.iter().enumerate() {
                        xb.index_axis_mut(ndarray::Axis(0), i).assign(&img.pixels);
                    }
                    xb
                }
            };

            let net = Net::new(student.spec(), &student.params);
            let out = net.loss_and_grad(
                x_student.view(),
                &LossKind::KlFromTeacher {
                    teacher_logits: teacher_logits.view(),
                    tau: cfg.tau,
                },
                true,
                false,
            );
            let mean_loss = out.loss_sum / batch.len() as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Diverged(format!("distillation step {step}")));
            }
            let grad = out.param_grad.unwrap();
            for ((p, v), g) in student.params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = MOMENTUM * *v - lr * g;
                *p += *v;
            }
            step += 1;
        }
        let _ = rng.gen::<u64>();
    }
    Ok(student)
}

fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    let t = step as f32 / total as f32;
    base * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UatConfig {
    pub inner_steps: usize,
    pub inner_lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub epsinf: f32,
}

impl Default for UatConfig {
    fn default() -> Self {
        UatConfig {
            inner_steps: 3,
            inner_lr: 0.5,
            epochs: 10,
            batch_size: 128,
            learning_rate: 0.05,
            seed: 0,
            epsinf: 16.0 / 255.0,
        }
    }
}

pub struct UatOutcome {
    pub student: Classifier,
    /// Fraction of batches where the inner ascent raised the loss.
    pub ascent_gain_fraction: f64,
}

/// Universal adversarial training baseline: a persistent universal delta
/// ascends on the student between descent steps, with teacher hard labels
/// standing in for ground truth.
pub fn uat_student_baseline(
    teacher: &Classifier,
    student_init: &Classifier,
    transfer: &LabeledDataset,
    cfg: &UatConfig,
) -> Result<UatOutcome> {
    if transfer.is_empty() {
        return Err(Error::Precondition("transfer set is empty".into()));
    }
    let mut student = student_init.clone();
    let shape = transfer.shape();
    let mut delta = Array3::<f32>::zeros(shape);
    let mut velocity = vec![0.0f32; student.params.len()];
    let n = transfer.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let mut ascent_gains = 0usize;
    let mut ascent_total = 0usize;

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(cfg.learning_rate, step, total_steps);
            let x = transfer.gather_batch(batch);
            let labels = teacher.predict_batch(x.view());

            let loss_at = |params: &[f32], delta: &Array3<f32>| -> (f64, Option<Array4<f32>>) {
                let mut xp = &x + &delta.view().insert_axis(ndarray::Axis(0));
                xp.mapv_inplace(|v| v.clamp(0.0, 1.0));
                let net = Net::new(student.spec(), params);
                let out = net.loss_and_grad(
                    xp.view(),
                    &LossKind::HardCe { labels: &labels },
                    false,
                    true,
                );
                (out.loss_sum / batch.len() as f64, out.input_grad)
            };

            if cfg.inner_steps > 0 {
                let (loss_before, _) = loss_at(&student.params, &delta);
                for _ in 0..cfg.inner_steps {
                    let (_, ig) = loss_at(&student.params, &delta);
                    let g = ig.unwrap();
                    let mut mean_g = Array3::<f32>::zeros(shape);
                    for row in 0..batch.len() {
                        mean_g += &g.index_axis(ndarray::Axis(0), row);
                    }
                    ndarray::Zip::from(&mut delta).and(&mean_g).for_each(|d, &gv| {
                        *d = (*d + cfg.inner_lr * gv).clamp(-cfg.epsinf, cfg.epsinf);
                    });
                }
                let (loss_after, _) = loss_at(&student.params, &delta);
                if loss_after >= loss_before {
                    ascent_gains += 1;
                }
                ascent_total += 1;
            }

            let mut xp = &x + &delta.view().insert_axis(ndarray::Axis(0));
            xp.mapv_inplace(|v| v.clamp(0.0, 1.0));
            let net = Net::new(student.spec(), &student.params);
            let out = net.loss_and_grad(
                xp.view(),
                &LossKind::HardCe { labels: &labels },
                true,
                false,
            );
            if !(out.loss_sum / batch.len() as f64).is_finite() {
                return Err(Error::Diverged("universal adversarial training".into()));
            }
            let grad = out.param_grad.unwrap();
            for ((p, v), g) in student.params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = MOMENTUM * *v - lr * g;
                *p += *v;
            }
            step += 1;
        }
        let _ = rng.gen::<u64>();
    }
    let ascent_gain_fraction = if ascent_total == 0 {
        0.0
    } else {
        ascent_gains as f64 / ascent_total as f64
    };
    Ok(UatOutcome {
        student,
        ascent_gain_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dov::{DovMethod, VerificationMaterials};
    use ndarray::Array3;
    use std::collections::BTreeSet;

    fn wrap_marked(ds: LabeledDataset) -> MarkedDataset {
        MarkedDataset {
            dataset: ds,
            materials: VerificationMaterials {
                method: DovMethod::Fingerprint,
                trigger: None,
                target_class: None,
                hue_shift: None,
                key_image: None,
                blend_ratio: None,
                marked_ids: BTreeSet::new(),
                train_probe_ids: BTreeSet::new(),
                heldout_probe_ids: BTreeSet::new(),
            },
        }
    }

    fn tiny_ds(n: usize, k: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let class = i % k;
            let base = (class as f32 + 0.5) / k as f32;
            images.push(Image::new(Array3::from_shape_fn((3, 8, 8), |_| {
                (base + rng.gen_range(-0.1..0.1f32)).clamp(0.0, 1.0)
            })));
            labels.push(class);
        }
        LabeledDataset::new(
            images,
            labels,
            (0..k).map(|i| format!("class_{i}")).collect(),
            (0..n as u64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn projection_examples() {
        let budgets = Budgets {
            k0: 1,
            eps2: 1.0,
            epsinf: 0.25,
        };
        let delta = Array3::from_shape_vec((1, 1, 2), vec![0.5f32, -0.5]).unwrap();
        let linf = project_norm(&delta, NormTag::Linf, &budgets);
        assert_eq!(linf.as_slice().unwrap(), &[0.25, -0.25]);

        let small = Array3::from_shape_vec((1, 1, 2), vec![0.3f32, 0.4]).unwrap();
        let l2 = project_norm(&small, NormTag::L2, &budgets);
        assert_eq!(l2, small); // interior point unchanged

        let l0_in = Array3::from_shape_vec((1, 1, 2), vec![0.3f32, -0.7]).unwrap();
        let l0 = project_norm(&l0_in, NormTag::L0, &budgets);
        assert_eq!(l0.as_slice().unwrap(), &[0.0, -0.7]);
    }

    #[test]
    fn zero_iterations_gives_zero_delta() {
        let ds = tiny_ds(20, 2, 1);
        let teacher = Classifier::init("micro_cnn", 2, 3, 7).unwrap();
        let cfg = PoolGenConfig {
            iterations: 0,
            batch_size: 10,
            ..PoolGenConfig::default()
        };
        let p = generate_perturbation(&teacher, &wrap_marked(ds.clone()), &cfg, 3).unwrap();
        assert!(p.delta.iter().all(|&v| v == 0.0));
        // Teacher loss unchanged by a zero perturbation.
        let clean = teacher.mean_loss(&ds).unwrap();
        let x = ds.gather_batch(&(0..ds.len()).collect::<Vec<_>>());
        let xp = &x + &p.delta.view().insert_axis(ndarray::Axis(0));
        let out = teacher.net().loss_and_grad(
            xp.view(),
            &LossKind::HardCe { labels: &ds.labels },
            false,
            false,
        );
        assert!((out.loss_sum / ds.len() as f64 - clean).abs() < 1e-9);
    }

    #[test]
    fn ascent_raises_teacher_loss() {
        let ds = tiny_ds(60, 3, 2);
        let cfg_t = crate::model::TrainConfig {
            epochs: 8,
            batch_size: 30,
            learning_rate: 0.08,
            ..Default::default()
        };
        let teacher = crate::model::train_classifier(&ds, &cfg_t, 5).unwrap();
        let marked = wrap_marked(ds.clone());
        let cfg = PoolGenConfig {
            iterations: 3,
            batch_size: 30,
            scale: 3.0,
            epsinf: 0.3,
            eps2: 3.0,
            ..PoolGenConfig::default()
        };
        let p = generate_perturbation(&teacher, &marked, &cfg, 11).unwrap();
        let labels_hat = teacher.predict_batch(
            ds.gather_batch(&(0..ds.len()).collect::<Vec<_>>()).view(),
        );
        let x = ds.gather_batch(&(0..ds.len()).collect::<Vec<_>>());
        let clean = teacher
            .net()
            .loss_and_grad(x.view(), &LossKind::HardCe { labels: &labels_hat }, false, false)
            .loss_sum;
        let mut xp = &x + &p.delta.view().insert_axis(ndarray::Axis(0));
        xp.mapv_inplace(|v| v.clamp(0.0, 1.0));
        let pert = teacher
            .net()
            .loss_and_grad(xp.view(), &LossKind::HardCe { labels: &labels_hat }, false, false)
            .loss_sum;
        assert!(pert > clean, "perturbed {pert} <= clean {clean}");
    }

    #[test]
    fn linear_model_delta_aligns_with_closed_form_gradient() {
        // Two-feature linear softmax classifier; the universal ascent
        // direction at delta=0 has the closed form
        //   g = mean_i W^T (p_i - onehot(yhat_i)).
        let params = vec![
            1.0f32, -0.5, // W row 0
            -0.8, 0.9, // W row 1
            0.0, 0.0, // bias
        ];
        let teacher = Classifier::from_parts("linear", 2, 2, params.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut images = Vec::new();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        for _ in 0..40 {
            images.push(Image::new(Array3::from_shape_fn((2, 1, 1), |_| {
                rng.gen_range(0.2..0.8f32)
            })));
        }
        let ds = LabeledDataset::new(
            images,
            labels,
            vec!["a".into(), "b".into()],
            (0..40).collect(),
        )
        .unwrap();

        // Closed-form oracle at delta = 0.
        let x = ds.gather_batch(&(0..40).collect::<Vec<_>>());
        let yhat = teacher.predict_batch(x.view());
        let logits = teacher.logits_batch(x.view());
        let probs = crate::model::layers::softmax(logits.view());
        let w = [[params[0] as f64, params[1] as f64], [params[2] as f64, params[3] as f64]];
        let mut g = [0.0f64; 2];
        for i in 0..40 {
            let mut dlogit = [probs[[i, 0]] as f64, probs[[i, 1]] as f64];
            dlogit[yhat[i]] -= 1.0;
            for f in 0..2 {
                g[f] += (dlogit[0] * w[0][f] + dlogit[1] * w[1][f]) / 40.0;
            }
        }

        let cfg = PoolGenConfig {
            iterations: 1,
            learning_rate: 0.01,
            scale: 10.0,
            reg: 0.0,
            batch_size: 40,
            batches_per_iter: None,
            k0: 2,        // keep every element: projections become no-ops
            eps2: 10.0,
            epsinf: 10.0,
            ascend_on_true_labels: false,
        };
        let p = generate_perturbation(&teacher, &wrap_marked(ds), &cfg, 9).unwrap();
        let d = p.delta.as_slice().unwrap();
        let dot = d[0] as f64 * g[0] + d[1] as f64 * g[1];
        let nd = ((d[0] as f64).powi(2) + (d[1] as f64).powi(2)).sqrt();
        let ng = (g[0] * g[0] + g[1] * g[1]).sqrt();
        let cos = dot / (nd * ng);
        assert!(cos >= 0.9, "cosine {cos}");
    }

    #[test]
    fn pool_members_distinct_and_persist_bit_exact() {
        let ds = tiny_ds(30, 2, 4);
        let teacher = Classifier::init("micro_cnn", 2, 3, 1).unwrap();
        let cfg = PoolGenConfig {
            iterations: 1,
            batch_size: 15,
            ..PoolGenConfig::default()
        };
        let pool = build_perturbation_pool(&teacher, &wrap_marked(ds), 4, &cfg, 100).unwrap();
        assert_eq!(pool.members.len(), 4);
        for i in 0..4 {
            for j in (i + 1)..4 {
                let dist: f64 = pool.members[i]
                    .delta
                    .iter()
                    .zip(pool.members[j].delta.iter())
                    .map(|(&a, &b)| ((a - b) as f64).powi(2))
                    .sum();
                assert!(dist > 0.0, "members {i} and {j} identical");
            }
        }
        // Budgets hold for every member under its own tag.
        for m in &pool.members {
            match m.norm_tag {
                NormTag::Linf => {
                    assert!(m.delta.iter().all(|v| v.abs() <= m.budgets.epsinf + 1e-6))
                }
                NormTag::L2 => {
                    let n: f64 = m.delta.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                    assert!(n <= m.budgets.eps2 as f64 + 1e-5);
                }
                NormTag::L0 => {
                    let nz = m.delta.iter().filter(|v| **v != 0.0).count();
                    assert!(nz <= m.budgets.k0);
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.bin");
        pool.save(&path).unwrap();
        let re = PerturbationPool::load(&path).unwrap();
        for (a, b) in pool.members.iter().zip(&re.members) {
            assert_eq!(a.delta, b.delta);
            assert_eq!(a.norm_tag, b.norm_tag);
        }
    }

    #[test]
    fn empty_chain_is_identity_and_noise_is_seeded() {
        let img = Image::new(Array3::from_elem((3, 8, 8), 0.5f32));
        let empty = CorruptionChain { steps: vec![] };
        let out = apply_corruption(&img, &empty, 1).unwrap();
        assert_eq!(out.pixels, img.pixels);

        let noisy = CorruptionChain {
            steps: vec![ChainStep {
                corruption_id: CorruptionId::GaussianNoise,
                severity: 3,
            }],
        };
        let a = apply_corruption(&img, &noisy, 42).unwrap();
        let b = apply_corruption(&img, &noisy, 42).unwrap();
        assert_eq!(a.pixels, b.pixels);
        let c = apply_corruption(&img, &noisy, 43).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn brightness_severity_one_adds_documented_constant() {
        let img = Image::new(Array3::from_elem((3, 4, 4), 0.5f32));
        let chain = CorruptionChain {
            steps: vec![ChainStep {
                corruption_id: CorruptionId::Brightness,
                severity: 1,
            }],
        };
        let out = apply_corruption(&img, &chain, 0).unwrap();
        for &v in out.pixels.iter() {
            assert!((v - (0.5 + BRIGHTNESS_DELTAS[0])).abs() < 1e-6);
        }
    }

    #[test]
    fn unknown_severity_rejected_and_chain_roundtrips() {
        let img = Image::new(Array3::from_elem((3, 4, 4), 0.5f32));
        let bad = CorruptionChain {
            steps: vec![ChainStep {
                corruption_id: CorruptionId::Brightness,
                severity: 9,
            }],
        };
        assert!(apply_corruption(&img, &bad, 0).is_err());
        let chain = CorruptionChain {
            steps: vec![
                ChainStep {
                    corruption_id: CorruptionId::Pixelate,
                    severity: 2,
                },
                ChainStep {
                    corruption_id: CorruptionId::Contrast,
                    severity: 4,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.json");
        chain.save(&path).unwrap();
        assert_eq!(CorruptionChain::load(&path).unwrap(), chain);
    }

    #[test]
    fn ga_trivial_and_dominance_cases() {
        let ds = tiny_ds(40, 2, 8);
        let teacher = Classifier::init("micro_cnn", 2, 3, 2).unwrap();
        let marked = wrap_marked(ds);

        // population=1, epochs=0: the initial random chain comes back.
        let cfg = GaConfig {
            population: 1,
            epochs: 0,
            chain_len: 2,
            batch_size: 16,
            ..GaConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let expect = {
            let eval_n = cfg.batch_size.min(marked.dataset.len());
            let _ = rand::seq::index::sample(&mut rng, marked.dataset.len(), eval_n);
            random_chain(&DEFAULT_REGISTRY, 2, &mut rng)
        };
        let got = search_corruption_chain(&teacher, &marked, &DEFAULT_REGISTRY, &cfg, 77).unwrap();
        assert_eq!(got, expect);

        // With identity in the registry, best fitness dominates clean loss.
        let registry: Vec<CorruptionId> = DEFAULT_REGISTRY
            .iter()
            .copied()
            .chain(std::iter::once(CorruptionId::Identity))
            .collect();
        let cfg2 = GaConfig {
            population: 6,
            epochs: 2,
            chain_len: 2,
            batch_size: 24,
            ..GaConfig::default()
        };
        let best = search_corruption_chain(&teacher, &marked, &registry, &cfg2, 5).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let positions =
            rand::seq::index::sample(&mut rng2, marked.dataset.len(), 24).into_vec();
        let images: Vec<Image> = positions
            .iter()
            .map(|&i| marked.dataset.images[i].clone())
            .collect();
        let labels: Vec<usize> = positions.iter().map(|&i| marked.dataset.labels[i]).collect();
        let best_fit = chain_fitness(&teacher, &images, &labels, &best, 5).unwrap();
        let neutral = CorruptionChain {
            steps: vec![
                ChainStep {
                    corruption_id: CorruptionId::Identity,
                    severity: 1,
                };
                2
            ],
        };
        let clean_fit = chain_fitness(&teacher, &images, &labels, &neutral, 5).unwrap();
        assert!(best_fit >= clean_fit - 1e-9);
    }

    #[test]
    fn distill_fixed_point_has_zero_initial_loss() {
        // teacher == student and skip-only ops: the first KL loss is zero.
        let ds = tiny_ds(16, 2, 12);
        let teacher = Classifier::init("micro_cnn", 2, 3, 40).unwrap();
        let pool = PerturbationPool {
            members: vec![],
            config: PoolGenConfig::default(),
        };
        let chain = CorruptionChain { steps: vec![] };
        let x = ds.gather_batch(&(0..ds.len()).collect::<Vec<_>>());
        let tl = teacher.net().logits(x.view());
        let out = teacher.net().loss_and_grad(
            x.view(),
            &LossKind::KlFromTeacher {
                teacher_logits: tl.view(),
                tau: 1.0,
            },
            false,
            false,
        );
        assert!(out.loss_sum.abs() < 1e-7);
        // And the guard refuses a student that *is* the teacher.
        let cfg = SktConfig {
            epochs: 1,
            batch_size: 8,
            op_probs: (1.0, 0.0, 0.0),
            ..SktConfig::default()
        };
        assert!(distill_selective(&teacher, &teacher, &ds, &pool, &chain, &cfg).is_err());
    }

    #[test]
    fn uat_zero_inner_steps_matches_hard_label_training() {
        let ds = tiny_ds(24, 2, 14);
        let teacher_cfg = crate::model::TrainConfig {
            epochs: 6,
            batch_size: 12,
            ..Default::default()
        };
        let teacher = crate::model::train_classifier(&ds, &teacher_cfg, 8).unwrap();
        let student_init = Classifier::init("micro_cnn", 2, 3, 99).unwrap();
        let cfg = UatConfig {
            inner_steps: 0,
            epochs: 2,
            batch_size: 12,
            seed: 5,
            ..UatConfig::default()
        };
        let out = uat_student_baseline(&teacher, &student_init, &ds, &cfg).unwrap();
        assert_eq!(out.ascent_gain_fraction, 0.0);
        // Oracle: plain hard-label training against teacher labels with the
        // same seed and schedule must produce identical parameters.
        let mut expect = student_init.clone();
        let mut velocity = vec![0.0f32; expect.params.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        let total = 2 * ds.len().div_ceil(12);
        let mut step = 0;
        for _ in 0..2 {
            order.shuffle(&mut rng);
            for batch in order.chunks(12) {
                let lr = cosine_lr(0.05, step, total);
                let x = ds.gather_batch(batch);
                let labels = teacher.predict_batch(x.view());
                let net = Net::new(expect.spec(), &expect.params);
                let g = net
                    .loss_and_grad(x.view(), &LossKind::HardCe { labels: &labels }, true, false)
                    .param_grad
                    .unwrap();
                for ((p, v), gg) in expect.params.iter_mut().zip(&mut velocity).zip(&g) {
                    *v = MOMENTUM * *v - lr * gg;
                    *p += *v;
                }
                step += 1;
            }
            let _ = rng.gen::<u64>();
        }
        assert_eq!(out.student.params, expect.params);
    }
}
