//! Supervised training: momentum SGD with cosine decay, optional mixup.

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::net::{LossKind, Net};
use super::Classifier;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};

const MOMENTUM: f32 = 0.9;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub mixup_enabled: bool,
    pub mixup_alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            learning_rate: 0.05,
            weight_decay: 5e-4,
            seed: 0,
            mixup_enabled: false,
            mixup_alpha: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Precondition(
                "training hyperparameters must be positive".into(),
            ));
        }
        if self.mixup_enabled && self.mixup_alpha <= 0.0 {
            return Err(Error::Precondition(
                "mixup_alpha must be positive when mixup is enabled".into(),
            ));
        }
        Ok(())
    }
}

/// x = lambda*x1 + (1-lambda)*x2; targets mix one-hot rows the same way.
pub fn mixup_batch(
    x1: &Array4<f32>,
    y1: &[usize],
    x2: &Array4<f32>,
    y2: &[usize],
    k: usize,
    lambda: f32,
) -> (Array4<f32>, Array2<f32>) {
    assert_eq!(x1.dim(), x2.dim(), "mixup inputs must agree in shape");
    assert!((0.0..=1.0).contains(&lambda));
    let x = x1 * lambda + &(x2 * (1.0 - lambda));
    let mut targets = Array2::<f32>::zeros((y1.len(), k));
    for (row, (&a, &b)) in y1.iter().zip(y2).enumerate() {
        targets[[row, a]] += lambda;
        targets[[row, b]] += 1.0 - lambda;
    }
    (x, targets)
}

/// Train a classifier from a fresh seeded initialization by mini-batch
/// momentum SGD on mean cross-entropy. Deterministic for fixed seeds.
pub fn train_classifier(
    d: &LabeledDataset,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<Classifier> {
    cfg.validate()?;
    if d.is_empty() {
        return Err(Error::Precondition("cannot train on empty dataset".into()));
    }
    if d.k() < 2 {
        return Err(Error::Precondition("training needs K >= 2".into()));
    }
    let (c, _, _) = d.shape();
    let arch = default_arch_for(d);
    let mut model = Classifier::init(arch, d.k(), c, init_seed)?;
    continue_training(&mut model, d, cfg)?;
    Ok(model)
}

/// Pick an architecture by input size: full desk net for 32x32-class
/// images, the micro net for tiny fixtures.
fn default_arch_for(d: &LabeledDataset) -> &'static str {
    let (_, h, w) = d.shape();
    if h >= 16 && w >= 16 {
        "desk_cnn_v1"
    } else {
        "micro_cnn"
    }
}

/// Run the training loop on an existing model (used by `train_classifier`
/// and by tests that need a specific architecture).
pub fn continue_training(
    model: &mut Classifier,
    d: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    let n = d.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut velocity = vec![0.0f32; model.params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch_idx in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(cfg.learning_rate, step, total_steps);
            let x = d.gather_batch(batch_idx);
            let labels: Vec<usize> = batch_idx.iter().map(|&i| d.labels[i]).collect();

            let (loss_mean, grad) = if cfg.mixup_enabled {
                let beta = Beta::new(cfg.mixup_alpha, cfg.mixup_alpha)
                    .map_err(|e| Error::Precondition(format!("bad mixup alpha: {e}")))?;
                let lambda = beta.sample(&mut rng) as f32;
                let mut perm: Vec<usize> = (0..batch_idx.len()).collect();
                perm.shuffle(&mut rng);
                let x2 = {
                    let picks: Vec<usize> = perm.iter().map(|&p| batch_idx[p]).collect();
                    d.gather_batch(&picks)
                };
                let y2: Vec<usize> = perm.iter().map(|&p| labels[p]).collect();
                let (xm, targets) = mixup_batch(&x, &labels, &x2, &y2, d.k(), lambda);
                let net = Net::new(model.spec(), &model.params);
                let out = net.loss_and_grad(
                    xm.view(),
                    &LossKind::SoftCe {
                        targets: targets.view(),
                    },
                    true,
                    false,
                );
                (out.loss_sum / batch_idx.len() as f64, out.param_grad.unwrap())
            } else {
                let net = Net::new(model.spec(), &model.params);
                let out =
                    net.loss_and_grad(x.view(), &LossKind::HardCe { labels: &labels }, true, false);
                (out.loss_sum / batch_idx.len() as f64, out.param_grad.unwrap())
            };

            if !loss_mean.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss {loss_mean} at step {step}"
                )));
            }
            for ((p, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grad) {
                let g = g + cfg.weight_decay * *p;
                *v = MOMENTUM * *v - lr * g;
                *p += *v;
            }
            step += 1;
        }
        let _ = rng.gen::<u64>(); // epoch boundary marker keeps streams aligned
    }
    Ok(())
}

fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    let t = step as f32 / total as f32;
    base * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
}
