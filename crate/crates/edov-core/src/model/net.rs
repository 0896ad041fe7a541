//! Network graph: a short sequence of blocks over a flat parameter vector.
//!
//! Three architectures are registered: `desk_cnn_v1` (a ~0.29M-parameter
//! residual CNN for 32x32 inputs), `micro_cnn` (a tiny net for fast tests),
//! and `linear` (pool + linear head, used by closed-form oracles).

use ndarray::{Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis, NdFloat};

use super::layers::{self, GnCache};
use crate::error::{Error, Result};
use crate::par;

/// Samples processed per work unit. Fixed so gradient reduction order (and
/// therefore the result) is independent of thread count.
pub const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockSpec {
    /// y = relu(gn(conv3x3(x))), optionally strided.
    Conv {
        cin: usize,
        cout: usize,
        stride: usize,
        groups: usize,
    },
    /// y = relu(x + gn(conv3x3(x))), stride 1.
    Res { channels: usize, groups: usize },
    /// logits = W * global_avg_pool(x) + b. Must be the last block.
    GapFc { cin: usize, k: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    pub arch_id: String,
    pub in_channels: usize,
    pub k: usize,
    pub blocks: Vec<BlockSpec>,
}

/// Named parameter tensor shapes, in flat-vector order.
pub type Manifest = Vec<(String, Vec<usize>)>;

impl NetSpec {
    pub fn build(arch_id: &str, k: usize, in_channels: usize) -> Result<NetSpec> {
        let blocks = match arch_id {
            "desk_cnn_v1" => vec![
                BlockSpec::Conv {
                    cin: in_channels,
                    cout: 16,
                    stride: 1,
                    groups: 4,
                },
                BlockSpec::Conv {
                    cin: 16,
                    cout: 32,
                    stride: 2,
                    groups: 8,
                },
                BlockSpec::Res {
                    channels: 32,
                    groups: 8,
                },
                BlockSpec::Conv {
                    cin: 32,
                    cout: 64,
                    stride: 2,
                    groups: 8,
                },
                BlockSpec::Res {
                    channels: 64,
                    groups: 8,
                },
                BlockSpec::Conv {
                    cin: 64,
                    cout: 128,
                    stride: 2,
                    groups: 8,
                },
                BlockSpec::Res {
                    channels: 128,
                    groups: 8,
                },
                BlockSpec::GapFc { cin: 128, k },
            ],
            "micro_cnn" => vec![
                BlockSpec::Conv {
                    cin: in_channels,
                    cout: 8,
                    stride: 2,
                    groups: 4,
                },
                BlockSpec::GapFc { cin: 8, k },
            ],
            "linear" => vec![BlockSpec::GapFc { cin: in_channels, k }],
            other => return Err(Error::UnknownArchitecture(other.to_string())),
        };
        Ok(NetSpec {
            arch_id: arch_id.to_string(),
            in_channels,
            k,
            blocks,
        })
    }

    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                BlockSpec::Conv { cin, cout, .. } => {
                    m.push((format!("b{i}.conv.w"), vec![*cout, cin * 9]));
                    m.push((format!("b{i}.conv.b"), vec![*cout]));
                    m.push((format!("b{i}.gn.g"), vec![*cout]));
                    m.push((format!("b{i}.gn.b"), vec![*cout]));
                }
                BlockSpec::Res { channels, .. } => {
                    m.push((format!("b{i}.conv.w"), vec![*channels, channels * 9]));
                    m.push((format!("b{i}.conv.b"), vec![*channels]));
                    m.push((format!("b{i}.gn.g"), vec![*channels]));
                    m.push((format!("b{i}.gn.b"), vec![*channels]));
                }
                BlockSpec::GapFc { cin, k } => {
                    m.push((format!("b{i}.fc.w"), vec![*k, *cin]));
                    m.push((format!("b{i}.fc.b"), vec![*k]));
                }
            }
        }
        m
    }

    pub fn param_count(&self) -> usize {
        self.manifest()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Byte offsets of each manifest entry in the flat vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut offs = Vec::new();
        let mut acc = 0usize;
        for (_, shape) in self.manifest() {
            offs.push(acc);
            acc += shape.iter().product::<usize>();
        }
        offs
    }
}

/// Borrowed view of a network: spec + flat parameters.
#[derive(Clone, Copy)]
pub struct Net<'p, F> {
    pub spec: &'p NetSpec,
    pub params: &'p [F],
}

#[allow(clippy::large_enum_variant)]
enum BlockCache<F> {
    ConvLike {
        input: Array4<F>,
        col: Array2<F>,
        gn: GnCache<F>,
        output: Array4<F>,
        residual: bool,
    },
    GapFc {
        pooled: Array2<F>,
        in_dims: (usize, usize, usize, usize),
    },
}

/// What to differentiate against.
pub enum LossKind<'a, F> {
    HardCe {
        labels: &'a [usize],
    },
    SoftCe {
        targets: ArrayView2<'a, F>,
    },
    /// Teacher logits are pre-computed on the clean inputs.
    KlFromTeacher {
        teacher_logits: ArrayView2<'a, F>,
        tau: F,
    },
}

pub struct BatchGrad<F> {
    pub loss_sum: f64,
    pub correct: usize,
    pub param_grad: Option<Vec<F>>,
    pub input_grad: Option<Array4<F>>,
}

struct ParamSlices<'p, F> {
    spec: &'p NetSpec,
    params: &'p [F],
    offsets: Vec<usize>,
}

impl<'p, F: NdFloat> ParamSlices<'p, F> {
    fn new(net: &Net<'p, F>) -> Self {
        ParamSlices {
            spec: net.spec,
            params: net.params,
            offsets: net.spec.offsets(),
        }
    }

    /// Manifest-entry index of the first tensor of block `b`.
    fn entry_base(&self, block: usize) -> usize {
        let mut e = 0usize;
        for bb in &self.spec.blocks[..block] {
            e += match bb {
                BlockSpec::Conv { .. } | BlockSpec::Res { .. } => 4,
                BlockSpec::GapFc { .. } => 2,
            };
        }
        e
    }

    fn tensor(&self, entry: usize) -> (&'p [F], Vec<usize>) {
        let manifest = self.spec.manifest();
        let (_, shape) = &manifest[entry];
        let len: usize = shape.iter().product();
        let off = self.offsets[entry];
        (&self.params[off..off + len], shape.clone())
    }

    fn matrix(&self, entry: usize) -> ArrayView2<'p, F> {
        let (slice, shape) = self.tensor(entry);
        ArrayView2::from_shape((shape[0], shape[1]), slice).unwrap()
    }

    fn vector(&self, entry: usize) -> ArrayView1<'p, F> {
        let (slice, shape) = self.tensor(entry);
        ArrayView1::from_shape(shape[0], slice).unwrap()
    }
}

impl<'p, F: NdFloat> Net<'p, F> {
    pub fn new(spec: &'p NetSpec, params: &'p [F]) -> Self {
        debug_assert_eq!(params.len(), spec.param_count());
        Net { spec, params }
    }

    fn forward_chunk(
        &self,
        x: ArrayView4<F>,
        with_cache: bool,
    ) -> (Array2<F>, Vec<BlockCache<F>>) {
        let ps = ParamSlices::new(self);
        let mut caches = Vec::new();
        let mut cur = x.to_owned();
        let mut logits = None;
        for (bi, block) in self.spec.blocks.iter().enumerate() {
            let base = ps.entry_base(bi);
            match block {
                BlockSpec::Conv { groups, .. } | BlockSpec::Res { groups, .. } => {
                    let stride = match block {
                        BlockSpec::Conv { stride, .. } => *stride,
                        _ => 1,
                    };
                    let residual = matches!(block, BlockSpec::Res { .. });
                    let w2 = ps.matrix(base);
                    let bias = ps.vector(base + 1);
                    let gamma = ps.vector(base + 2);
                    let beta = ps.vector(base + 3);
                    let (conv_out, col) = layers::conv_forward(cur.view(), w2, bias, stride);
                    let (mut gn_out, gn_cache) =
                        layers::groupnorm_forward(&conv_out, gamma, beta, *groups);
                    if residual {
                        gn_out += &cur;
                    }
                    layers::relu_inplace(&mut gn_out);
                    if with_cache {
                        caches.push(BlockCache::ConvLike {
                            input: cur,
                            col,
                            gn: gn_cache,
                            output: gn_out.clone(),
                            residual,
                        });
                    }
                    cur = gn_out;
                }
                BlockSpec::GapFc { .. } => {
                    let w = ps.matrix(base);
                    let b = ps.vector(base + 1);
                    let pooled = layers::gap_forward(cur.view());
                    let mut out = pooled.dot(&w.t());
                    for mut row in out.rows_mut() {
                        row += &b;
                    }
                    if with_cache {
                        caches.push(BlockCache::GapFc {
                            pooled,
                            in_dims: cur.dim(),
                        });
                    }
                    logits = Some(out);
                }
            }
        }
        (logits.expect("net ends with GapFc"), caches)
    }

    fn backward_chunk(
        &self,
        caches: &[BlockCache<F>],
        dlogits: Array2<F>,
        want_params: bool,
        want_input: bool,
    ) -> (Option<Vec<F>>, Option<Array4<F>>) {
        let ps = ParamSlices::new(self);
        let mut grad = if want_params {
            Some(vec![F::zero(); self.spec.param_count()])
        } else {
            None
        };
        let offsets = ps.offsets.clone();
        let manifest = self.spec.manifest();
        let write_grad = |g: &mut Option<Vec<F>>, entry: usize, values: &[F]| {
            if let Some(gv) = g {
                let len: usize = manifest[entry].1.iter().product();
                let off = offsets[entry];
                for (dst, src) in gv[off..off + len].iter_mut().zip(values) {
                    *dst += *src;
                }
            }
        };
        let mut dcur: Option<Array4<F>> = None;
        let mut dlogits = Some(dlogits);
        for (bi, block) in self.spec.blocks.iter().enumerate().rev() {
            let base = ps.entry_base(bi);
            let first_block = bi == 0;
            match (&caches[bi], block) {
                (BlockCache::GapFc { pooled, in_dims }, BlockSpec::GapFc { .. }) => {
                    let dl = dlogits.take().expect("logit grad consumed once");
                    let w = ps.matrix(base);
                    if want_params {
                        let dw = dl.t().dot(pooled);
                        let db = dl.sum_axis(Axis(0));
                        write_grad(&mut grad, base, dw.as_slice().unwrap());
                        write_grad(&mut grad, base + 1, db.as_slice().unwrap());
                    }
                    let dpooled = dl.dot(&w);
                    dcur = Some(layers::gap_backward(&dpooled, *in_dims));
                }
                (
                    BlockCache::ConvLike {
                        input,
                        col,
                        gn,
                        output,
                        residual,
                    },
                    BlockSpec::Conv { groups, .. } | BlockSpec::Res { groups, .. },
                ) => {
                    let stride = match block {
                        BlockSpec::Conv { stride, .. } => *stride,
                        _ => 1,
                    };
                    let mut dy = dcur.take().expect("downstream grad present");
                    layers::relu_backward_inplace(&mut dy, output);
                    let gamma = ps.vector(base + 2);
                    let (du, dgamma, dbeta) = layers::groupnorm_backward(&dy, gn, gamma, *groups);
                    if want_params {
                        write_grad(&mut grad, base + 2, dgamma.as_slice().unwrap());
                        write_grad(&mut grad, base + 3, dbeta.as_slice().unwrap());
                    }
                    let w2 = ps.matrix(base);
                    let need_dx = !first_block || want_input || *residual;
                    let (dw2, db, dx) =
                        layers::conv_backward(&du, col, w2, input.dim(), stride, need_dx);
                    if want_params {
                        write_grad(&mut grad, base, dw2.as_slice().unwrap());
                        write_grad(&mut grad, base + 1, db.as_slice().unwrap());
                    }
                    let mut dx_total = dx.unwrap_or_else(|| Array4::zeros(input.dim()));
                    if *residual {
                        dx_total += &dy;
                    }
                    dcur = Some(dx_total);
                }
                _ => unreachable!("cache/block mismatch"),
            }
        }
        let input_grad = if want_input { dcur } else { None };
        (grad, input_grad)
    }

    /// Forward pass over an arbitrary batch, chunked and parallel.
    pub fn logits(&self, x: ArrayView4<F>) -> Array2<F>
    where
        F: Send + Sync,
    {
        let n = x.dim().0;
        if n == 0 {
            return Array2::zeros((0, self.spec.k));
        }
        let n_chunks = n.div_ceil(CHUNK);
        let parts = par::map_range(n_chunks, |ci| {
            let lo = ci * CHUNK;
            let hi = ((ci + 1) * CHUNK).min(n);
            let view = x.slice(ndarray::s![lo..hi, .., .., ..]);
            self.forward_chunk(view, false).0
        });
        let mut out = Array2::zeros((n, self.spec.k));
        let mut row = 0usize;
        for p in parts {
            let rows = p.nrows();
            out.slice_mut(ndarray::s![row..row + rows, ..]).assign(&p);
            row += rows;
        }
        out
    }

    /// Loss + gradients over a batch. Gradients come back normalized by the
    /// batch size; `loss_sum` is the un-normalized total.
    pub fn loss_and_grad(
        &self,
        x: ArrayView4<F>,
        loss: &LossKind<'_, F>,
        want_params: bool,
        want_input: bool,
    ) -> BatchGrad<F>
    where
        F: Send + Sync,
    {
        let n = x.dim().0;
        assert!(n > 0, "empty batch");
        let n_chunks = n.div_ceil(CHUNK);
        let parts = par::map_range(n_chunks, |ci| {
            let lo = ci * CHUNK;
            let hi = ((ci + 1) * CHUNK).min(n);
            let view = x.slice(ndarray::s![lo..hi, .., .., ..]);
            let (logits, caches) = self.forward_chunk(view, true);
            let (loss_sum, dlogits, correct) = match loss {
                LossKind::HardCe { labels } => layers::ce_hard(logits.view(), &labels[lo..hi]),
                LossKind::SoftCe { targets } => {
                    let (l, d) = layers::ce_soft(
                        logits.view(),
                        targets.slice(ndarray::s![lo..hi, ..]),
                    );
                    (l, d, 0)
                }
                LossKind::KlFromTeacher {
                    teacher_logits,
                    tau,
                } => {
                    let (l, d) = layers::kl_from_teacher(
                        logits.view(),
                        teacher_logits.slice(ndarray::s![lo..hi, ..]),
                        *tau,
                    );
                    (l, d, 0)
                }
            };
            let (pg, ig) = self.backward_chunk(&caches, dlogits, want_params, want_input);
            (loss_sum, correct, pg, ig)
        });

        let scale = F::from(n).unwrap().recip();
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut param_grad = if want_params {
            Some(vec![F::zero(); self.spec.param_count()])
        } else {
            None
        };
        let mut input_grad = if want_input {
            Some(Array4::zeros(x.dim()))
        } else {
            None
        };
        let mut row = 0usize;
        for (l, c, pg, ig) in parts {
            loss_sum += l;
            correct += c;
            if let (Some(total), Some(part)) = (param_grad.as_mut(), pg) {
                for (t, p) in total.iter_mut().zip(&part) {
                    *t += *p * scale;
                }
            }
            if let (Some(total), Some(part)) = (input_grad.as_mut(), ig) {
                let rows = part.dim().0;
                total
                    .slice_mut(ndarray::s![row..row + rows, .., .., ..])
                    .assign(&part.mapv(|v| v * scale));
                row += rows;
            }
        }
        BatchGrad {
            loss_sum,
            correct,
            param_grad,
            input_grad,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(spec: &NetSpec, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0f64; spec.param_count()];
        let manifest = spec.manifest();
        let offsets = spec.offsets();
        for (i, (name, shape)) in manifest.iter().enumerate() {
            let len: usize = shape.iter().product();
            let std = if name.contains("conv.w") || name.contains("fc.w") {
                (1.0 / shape[1] as f64).sqrt()
            } else if name.contains("gn.g") {
                0.0 // handled below: gamma = 1 + noise
            } else {
                0.05
            };
            for v in &mut params[offsets[i]..offsets[i] + len] {
                *v = rng.gen_range(-1.0..1.0) * std.max(0.05);
                if name.contains("gn.g") {
                    *v += 1.0;
                }
            }
        }
        params
    }

    /// Central finite differences against the analytic parameter gradient,
    /// in f64 on the micro architecture.
    #[test]
    fn parameter_gradients_match_finite_differences() {
        let spec = NetSpec::build("micro_cnn", 3, 2).unwrap();
        let params = random_params(&spec, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array4::from_shape_fn((3, 2, 6, 6), |_| rng.gen_range(0.0..1.0));
        let labels = vec![0usize, 2, 1];

        let net = Net::new(&spec, &params);
        let g = net
            .loss_and_grad(x.view(), &LossKind::HardCe { labels: &labels }, true, false)
            .param_grad
            .unwrap();

        let h = 1e-5;
        let mut checked = 0;
        for idx in (0..params.len()).step_by(7) {
            let mut plus = params.clone();
            plus[idx] += h;
            let mut minus = params.clone();
            minus[idx] -= h;
            let lp = Net::new(&spec, &plus)
                .loss_and_grad(x.view(), &LossKind::HardCe { labels: &labels }, false, false)
                .loss_sum
                / 3.0;
            let lm = Net::new(&spec, &minus)
                .loss_and_grad(x.view(), &LossKind::HardCe { labels: &labels }, false, false)
                .loss_sum
                / 3.0;
            let fd = (lp - lm) / (2.0 * h);
            let analytic = g[idx];
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            assert!(
                ((fd - analytic).abs() / denom) < 1e-4,
                "param {idx}: fd={fd}, analytic={analytic}"
            );
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let spec = NetSpec::build("micro_cnn", 2, 1).unwrap();
        let params = random_params(&spec, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array4::from_shape_fn((2, 1, 5, 5), |_| rng.gen_range(0.1..0.9));
        let labels = vec![1usize, 0];
        let net = Net::new(&spec, &params);
        let ig = net
            .loss_and_grad(x.view(), &LossKind::HardCe { labels: &labels }, false, true)
            .input_grad
            .unwrap();
        let h = 1e-5;
        for idx in (0..x.len()).step_by(3) {
            let mut plus = x.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            let mut minus = x.clone();
            minus.as_slice_mut().unwrap()[idx] -= h;
            let lp = net
                .loss_and_grad(plus.view(), &LossKind::HardCe { labels: &labels }, false, false)
                .loss_sum
                / 2.0;
            let lm = net
                .loss_and_grad(minus.view(), &LossKind::HardCe { labels: &labels }, false, false)
                .loss_sum
                / 2.0;
            let fd = (lp - lm) / (2.0 * h);
            let analytic = ig.as_slice().unwrap()[idx];
            let denom = fd.abs().max(analytic.abs()).max(1e-7);
            assert!(
                ((fd - analytic).abs() / denom) < 1e-4,
                "input {idx}: fd={fd} analytic={analytic}"
            );
        }
    }

    #[test]
    fn residual_block_gradients_match_finite_differences() {
        let spec = NetSpec {
            arch_id: "test_res".into(),
            in_channels: 4,
            k: 2,
            blocks: vec![
                BlockSpec::Res {
                    channels: 4,
                    groups: 2,
                },
                BlockSpec::GapFc { cin: 4, k: 2 },
            ],
        };
        let params = random_params(&spec, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array4::from_shape_fn((2, 4, 4, 4), |_| rng.gen_range(0.0..1.0));
        let labels = vec![0usize, 1];
        let net = Net::new(&spec, &params);
        let g = net
            .loss_and_grad(x.view(), &LossKind::HardCe { labels: &labels }, true, false)
            .param_grad
            .unwrap();
        let h = 1e-5;
        for idx in (0..params.len()).step_by(11) {
            let mut plus = params.clone();
            plus[idx] += h;
            let mut minus = params.clone();
            minus[idx] -= h;
            let lp = Net::new(&spec, &plus)
                .loss_and_grad(x.view(), &LossKind::HardCe { labels: &labels }, false, false)
                .loss_sum
                / 2.0;
            let lm = Net::new(&spec, &minus)
                .loss_and_grad(x.view(), &LossKind::HardCe { labels: &labels }, false, false)
                .loss_sum
                / 2.0;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(g[idx].abs()).max(1e-8);
            assert!(
                ((fd - g[idx]).abs() / denom) < 1e-4,
                "param {idx}: fd={fd} analytic={}",
                g[idx]
            );
        }
    }

    #[test]
    fn desk_arch_param_budget() {
        let spec = NetSpec::build("desk_cnn_v1", 10, 3).unwrap();
        let n = spec.param_count();
        assert!(
            (200_000..400_000).contains(&n),
            "desk architecture should stay near 0.3M params, got {n}"
        );
    }

    #[test]
    fn chunked_logits_match_single_chunk() {
        let spec = NetSpec::build("micro_cnn", 4, 3).unwrap();
        let params = random_params(&spec, 77);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array4::from_shape_fn((CHUNK * 2 + 5, 3, 8, 8), |_| rng.gen_range(0.0..1.0));
        let net = Net::new(&spec, &params);
        let all = net.logits(x.view());
        let (first, _) = net.forward_chunk(x.slice(ndarray::s![..7, .., .., ..]), false);
        for r in 0..7 {
            for c in 0..4 {
                assert!((all[[r, c]] - first[[r, c]]).abs() < 1e-12);
            }
        }
    }
}
