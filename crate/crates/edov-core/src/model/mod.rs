//! Classifier abstraction, supervised training, and parameter-space
//! utilities.

pub mod checkpoint;
pub mod layers;
pub mod net;
pub mod train;

use ndarray::{Array2, ArrayView4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
pub use net::{LossKind, Net, NetSpec};
pub use train::{mixup_batch, train_classifier, TrainConfig};

/// Anything that maps image batches to logits. Verifiers are written
/// against this trait so tests can substitute scripted predictors.
pub trait Model: Sync {
    fn num_classes(&self) -> usize;
    fn logits_batch(&self, x: ArrayView4<f32>) -> Array2<f32>;

    fn predict_batch(&self, x: ArrayView4<f32>) -> Vec<usize> {
        let logits = self.logits_batch(x);
        (0..logits.nrows())
            .map(|r| layers::argmax_row(logits.view(), r))
            .collect()
    }
}

/// A trained classifier: architecture tag plus a flat f32 parameter vector.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub architecture_id: String,
    pub k: usize,
    pub in_channels: usize,
    pub params: Vec<f32>,
    spec: NetSpec,
}

impl Classifier {
    /// Fresh seeded initialization (He-style for convolutions).
    pub fn init(architecture_id: &str, k: usize, in_channels: usize, seed: u64) -> Result<Self> {
        let spec = NetSpec::build(architecture_id, k, in_channels)?;
        let mut params = vec![0.0f32; spec.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offsets = spec.offsets();
        for (i, (name, shape)) in spec.manifest().iter().enumerate() {
            let len: usize = shape.iter().product();
            let seg = &mut params[offsets[i]..offsets[i] + len];
            if name.ends_with("conv.w") {
                let fan_in = shape[1] as f64;
                let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
                for v in seg {
                    *v = dist.sample(&mut rng) as f32;
                }
            } else if name.ends_with("fc.w") {
                let fan_in = shape[1] as f64;
                let dist = Normal::new(0.0, (1.0 / fan_in).sqrt()).unwrap();
                for v in seg {
                    *v = dist.sample(&mut rng) as f32;
                }
            } else if name.ends_with("gn.g") {
                seg.fill(1.0);
            }
            // conv.b, gn.b, fc.b stay zero.
        }
        Ok(Classifier {
            architecture_id: architecture_id.to_string(),
            k,
            in_channels,
            params,
            spec,
        })
    }

    pub fn from_parts(
        architecture_id: &str,
        k: usize,
        in_channels: usize,
        params: Vec<f32>,
    ) -> Result<Self> {
        let spec = NetSpec::build(architecture_id, k, in_channels)?;
        if params.len() != spec.param_count() {
            return Err(Error::ManifestMismatch(format!(
                "expected {} parameters for {architecture_id}, got {}",
                spec.param_count(),
                params.len()
            )));
        }
        Ok(Classifier {
            architecture_id: architecture_id.to_string(),
            k,
            in_channels,
            params,
            spec,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn net(&self) -> Net<'_, f32> {
        Net::new(&self.spec, &self.params)
    }

    pub fn accuracy(&self, ds: &LabeledDataset) -> f64 {
        let positions: Vec<usize> = (0..ds.len()).collect();
        let mut correct = 0usize;
        for batch in positions.chunks(256) {
            let x = ds.gather_batch(batch);
            let preds = self.predict_batch(x.view());
            correct += preds
                .iter()
                .zip(batch.iter())
                .filter(|(p, i)| **p == ds.labels[**i])
                .count();
        }
        correct as f64 / ds.len() as f64
    }

    /// Per-sample cross-entropy losses for the listed sample positions.
    pub fn per_sample_losses(&self, ds: &LabeledDataset, positions: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(positions.len());
        for batch in positions.chunks(256) {
            let x = ds.gather_batch(batch);
            let logits = self.logits_batch(x.view());
            let logp = layers::log_softmax(logits.view());
            for (row, &pos) in batch.iter().enumerate() {
                out.push(-logp[[row, ds.labels[pos]]] as f64);
            }
        }
        out
    }

    pub fn mean_loss(&self, ds: &LabeledDataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::Precondition("mean_loss on empty dataset".into()));
        }
        let positions: Vec<usize> = (0..ds.len()).collect();
        let losses = self.per_sample_losses(ds, &positions);
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

impl Model for Classifier {
    fn num_classes(&self) -> usize {
        self.k
    }

    fn logits_batch(&self, x: ArrayView4<f32>) -> Array2<f32> {
        self.net().logits(x)
    }
}

/// Elementwise linear interpolation between two parameter vectors:
/// (1-alpha) * a + alpha * b.
pub fn interpolate_params(a: &Classifier, b: &Classifier, alpha: f32) -> Result<Classifier> {
    if a.architecture_id != b.architecture_id
        || a.spec.manifest() != b.spec.manifest()
        || a.params.len() != b.params.len()
    {
        return Err(Error::ManifestMismatch(format!(
            "{} vs {}",
            a.architecture_id, b.architecture_id
        )));
    }
    let params = a
        .params
        .iter()
        .zip(&b.params)
        .map(|(&pa, &pb)| (1.0 - alpha) * pa + alpha * pb)
        .collect();
    Classifier::from_parts(&a.architecture_id, a.k, a.in_channels, params)
}
