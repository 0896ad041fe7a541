//! Layer primitives: 3x3 convolution via im2col + GEMM, group
//! normalization, global-average-pool + linear head, and loss functions.
//!
//! Everything is generic over the float type; training runs in f32 while
//! gradient checks instantiate the same code at f64.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis, NdFloat};

pub const GN_EPS: f64 = 1e-5;

pub fn conv_out_dim(input: usize, stride: usize) -> usize {
    // 3x3 kernel, padding 1.
    (input + 2 - 3) / stride + 1
}

/// Unfold a chunk of images into a (cin*9) x (n*oh*ow) column matrix.
pub fn im2col<F: NdFloat>(x: ArrayView4<F>, stride: usize) -> Array2<F> {
    let (n, cin, h, w) = x.dim();
    let oh = conv_out_dim(h, stride);
    let ow = conv_out_dim(w, stride);
    let cols = n * oh * ow;
    let mut col = Array2::<F>::zeros((cin * 9, cols));
    let col_slice = col.as_slice_mut().expect("standard layout");
    for s in 0..n {
        let img = x.index_axis(Axis(0), s);
        let img = img.as_slice().expect("contiguous chunk");
        for ci in 0..cin {
            let plane = &img[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ci * 9 + ky * 3 + kx;
                    let base = row * cols + s * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = iy as usize * w;
                        let dst = base + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            col_slice[dst + ox] = plane[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Fold a column-gradient matrix back onto image gradients (accumulating).
pub fn col2im<F: NdFloat>(
    dcol: &Array2<F>,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
) -> Array4<F> {
    let oh = conv_out_dim(h, stride);
    let ow = conv_out_dim(w, stride);
    let cols = n * oh * ow;
    let dcol_slice = dcol.as_slice().expect("standard layout");
    let mut dx = Array4::<F>::zeros((n, cin, h, w));
    let dx_slice = dx.as_slice_mut().expect("standard layout");
    for s in 0..n {
        for ci in 0..cin {
            let plane_off = (s * cin + ci) * h * w;
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ci * 9 + ky * 3 + kx;
                    let base = row * cols + s * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = plane_off + iy as usize * w;
                        let src = base + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx_slice[dst_row + ix as usize] += dcol_slice[src + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 3x3 conv forward. `w2` is (cout, cin*9). Returns output and the column
/// matrix, which the backward pass reuses.
pub fn conv_forward<F: NdFloat>(
    x: ArrayView4<F>,
    w2: ArrayView2<F>,
    bias: ArrayView1<F>,
    stride: usize,
) -> (Array4<F>, Array2<F>) {
    let (n, _cin, h, w) = x.dim();
    let cout = w2.nrows();
    let oh = conv_out_dim(h, stride);
    let ow = conv_out_dim(w, stride);
    let col = im2col(x, stride);
    let out2 = w2.dot(&col); // (cout, n*oh*ow)
    let mut out = Array4::<F>::zeros((n, cout, oh, ow));
    let out_slice = out.as_slice_mut().unwrap();
    let out2_slice = out2.as_slice().unwrap();
    let cols = n * oh * ow;
    for s in 0..n {
        for co in 0..cout {
            let b = bias[co];
            let src = co * cols + s * oh * ow;
            let dst = (s * cout + co) * oh * ow;
            for p in 0..oh * ow {
                out_slice[dst + p] = out2_slice[src + p] + b;
            }
        }
    }
    (out, col)
}

/// Backward of `conv_forward`. Returns (dw2, dbias, dx?).
pub fn conv_backward<F: NdFloat>(
    dout: &Array4<F>,
    col: &Array2<F>,
    w2: ArrayView2<F>,
    input_dims: (usize, usize, usize, usize),
    stride: usize,
    want_dx: bool,
) -> (Array2<F>, Array1<F>, Option<Array4<F>>) {
    let (n, cin, h, w) = input_dims;
    let (_, cout, oh, ow) = dout.dim();
    let cols = n * oh * ow;
    // Regroup dout from (n,cout,oh,ow) to (cout, n*oh*ow).
    let mut d2 = Array2::<F>::zeros((cout, cols));
    {
        let d2s = d2.as_slice_mut().unwrap();
        let ds = dout.as_slice().unwrap();
        for s in 0..n {
            for co in 0..cout {
                let src = (s * cout + co) * oh * ow;
                let dst = co * cols + s * oh * ow;
                d2s[dst..dst + oh * ow].copy_from_slice(&ds[src..src + oh * ow]);
            }
        }
    }
    let dw2 = d2.dot(&col.t());
    let dbias = d2.sum_axis(Axis(1));
    let dx = if want_dx {
        let dcol = w2.t().dot(&d2);
        Some(col2im(&dcol, n, cin, h, w, stride))
    } else {
        None
    };
    (dw2, dbias, dx)
}

pub struct GnCache<F> {
    pub xhat: Array4<F>,
    pub invstd: Array2<F>, // (n, groups)
}

pub fn groupnorm_forward<F: NdFloat>(
    u: &Array4<F>,
    gamma: ArrayView1<F>,
    beta: ArrayView1<F>,
    groups: usize,
) -> (Array4<F>, GnCache<F>) {
    let (n, c, h, w) = u.dim();
    let cg = c / groups;
    let gsz = F::from(cg * h * w).unwrap();
    let eps = F::from(GN_EPS).unwrap();
    let mut xhat = Array4::<F>::zeros((n, c, h, w));
    let mut out = Array4::<F>::zeros((n, c, h, w));
    let mut invstd = Array2::<F>::zeros((n, groups));
    let us = u.as_slice().unwrap();
    let xs = xhat.as_slice_mut().unwrap();
    let os = out.as_slice_mut().unwrap();
    for s in 0..n {
        for g in 0..groups {
            let start = (s * c + g * cg) * h * w;
            let end = start + cg * h * w;
            let seg = &us[start..end];
            let mut mean = F::zero();
            for &v in seg {
                mean += v;
            }
            mean /= gsz;
            let mut var = F::zero();
            for &v in seg {
                let d = v - mean;
                var += d * d;
            }
            var /= gsz;
            let istd = (var + eps).sqrt().recip();
            invstd[[s, g]] = istd;
            for (i, &v) in seg.iter().enumerate() {
                let idx = start + i;
                let ch = g * cg + i / (h * w);
                let xh = (v - mean) * istd;
                xs[idx] = xh;
                os[idx] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (out, GnCache { xhat, invstd })
}

pub fn groupnorm_backward<F: NdFloat>(
    dout: &Array4<F>,
    cache: &GnCache<F>,
    gamma: ArrayView1<F>,
    groups: usize,
) -> (Array4<F>, Array1<F>, Array1<F>) {
    let (n, c, h, w) = dout.dim();
    let cg = c / groups;
    let gsz = F::from(cg * h * w).unwrap();
    let mut du = Array4::<F>::zeros((n, c, h, w));
    let mut dgamma = Array1::<F>::zeros(c);
    let mut dbeta = Array1::<F>::zeros(c);
    let ds = dout.as_slice().unwrap();
    let xs = cache.xhat.as_slice().unwrap();
    let dus = du.as_slice_mut().unwrap();
    for s in 0..n {
        for g in 0..groups {
            let start = (s * c + g * cg) * h * w;
            let len = cg * h * w;
            // Per-group means of dxhat and dxhat*xhat.
            let mut m1 = F::zero();
            let mut m2 = F::zero();
            for i in 0..len {
                let ch = g * cg + i / (h * w);
                let dxh = ds[start + i] * gamma[ch];
                m1 += dxh;
                m2 += dxh * xs[start + i];
            }
            m1 /= gsz;
            m2 /= gsz;
            let istd = cache.invstd[[s, g]];
            for i in 0..len {
                let ch = g * cg + i / (h * w);
                let d = ds[start + i];
                let xh = xs[start + i];
                dgamma[ch] += d * xh;
                dbeta[ch] += d;
                let dxh = d * gamma[ch];
                dus[start + i] = istd * (dxh - m1 - xh * m2);
            }
        }
    }
    (du, dgamma, dbeta)
}

/// y = max(0, v) in place.
pub fn relu_inplace<F: NdFloat>(v: &mut Array4<F>) {
    v.mapv_inplace(|x| if x > F::zero() { x } else { F::zero() });
}

/// dv = dy where y > 0 (mask taken from the stored output).
pub fn relu_backward_inplace<F: NdFloat>(dy: &mut Array4<F>, y: &Array4<F>) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &yy| {
        if yy <= F::zero() {
            *d = F::zero();
        }
    });
}

/// Global average pool: (n,c,h,w) -> (n,c).
pub fn gap_forward<F: NdFloat>(x: ArrayView4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let scale = F::from(h * w).unwrap().recip();
    let mut out = Array2::<F>::zeros((n, c));
    for s in 0..n {
        for ch in 0..c {
            let mut acc = F::zero();
            for v in x.index_axis(Axis(0), s).index_axis(Axis(0), ch).iter() {
                acc += *v;
            }
            out[[s, ch]] = acc * scale;
        }
    }
    out
}

pub fn gap_backward<F: NdFloat>(
    dpooled: &Array2<F>,
    dims: (usize, usize, usize, usize),
) -> Array4<F> {
    let (n, c, h, w) = dims;
    let scale = F::from(h * w).unwrap().recip();
    let mut dx = Array4::<F>::zeros((n, c, h, w));
    for s in 0..n {
        for ch in 0..c {
            let v = dpooled[[s, ch]] * scale;
            dx.index_axis_mut(Axis(0), s)
                .index_axis_mut(Axis(0), ch)
                .fill(v);
        }
    }
    dx
}

/// Row-wise log-softmax.
pub fn log_softmax<F: NdFloat>(logits: ArrayView2<F>) -> Array2<F> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter() {
            sum += (*v - max).exp();
        }
        let lse = max + sum.ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax<F: NdFloat>(logits: ArrayView2<F>) -> Array2<F> {
    let mut out = log_softmax(logits);
    out.mapv_inplace(F::exp);
    out
}

/// Cross-entropy against hard labels. Returns (loss summed over rows,
/// dlogits not yet divided by batch size, #correct argmax).
pub fn ce_hard<F: NdFloat>(logits: ArrayView2<F>, labels: &[usize]) -> (f64, Array2<F>, usize) {
    let logp = log_softmax(logits);
    let mut dlogits = logp.mapv(F::exp);
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        loss -= logp[[row, label]].to_f64().unwrap();
        dlogits[[row, label]] -= F::one();
        let pred = argmax_row(logits, row);
        if pred == label {
            correct += 1;
        }
    }
    (loss, dlogits, correct)
}

/// Cross-entropy against soft targets (rows sum to 1).
pub fn ce_soft<F: NdFloat>(logits: ArrayView2<F>, targets: ArrayView2<F>) -> (f64, Array2<F>) {
    let logp = log_softmax(logits);
    let mut loss = F::zero();
    for (lp, t) in logp.iter().zip(targets.iter()) {
        loss -= *t * *lp;
    }
    let dlogits = logp.mapv(F::exp) - targets;
    (loss.to_f64().unwrap(), dlogits)
}

/// KL(softmax(teacher/tau) || softmax(student/tau)) with gradient w.r.t.
/// student logits. Teacher distribution is the target.
pub fn kl_from_teacher<F: NdFloat>(
    student_logits: ArrayView2<F>,
    teacher_logits: ArrayView2<F>,
    tau: F,
) -> (f64, Array2<F>) {
    let zs = student_logits.mapv(|v| v / tau);
    let zt = teacher_logits.mapv(|v| v / tau);
    let logps = log_softmax(zs.view());
    let logpt = log_softmax(zt.view());
    let pt = logpt.mapv(F::exp);
    let ps = logps.mapv(F::exp);
    let mut loss = F::zero();
    for ((&t, &lt), &ls) in pt.iter().zip(logpt.iter()).zip(logps.iter()) {
        if t > F::zero() {
            loss += t * (lt - ls);
        }
    }
    let dlogits = (ps - &pt).mapv(|v| v / tau);
    (loss.to_f64().unwrap(), dlogits)
}

pub fn argmax_row<F: NdFloat>(m: ArrayView2<F>, row: usize) -> usize {
    let r = m.row(row);
    let mut best = 0usize;
    let mut best_v = r[0];
    for (i, &v) in r.iter().enumerate().skip(1) {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
