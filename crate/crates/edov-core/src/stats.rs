//! Shared verification statistics: Welch's one-tailed T-test, harmonic-mean
//! p aggregation, annotation entropy, and loss-barrier profiling.
//!
//! The Student-t survival function is evaluated through the regularized
//! incomplete beta function with continued-fraction expansion, good to
//! ~1e-10 absolute, so reports do not depend on an external stats library.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Classifier;

/// Detection threshold for verification success rate.
pub const VSR_THRESHOLD: f64 = 0.30;
/// Detection threshold for hypothesis-test p-values.
pub const P_THRESHOLD: f64 = 0.01;

/// Which side of the test favors the alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternative {
    /// H1: mean(b) > mean(a)
    BGreater,
    /// H1: mean(a) > mean(b)
    AGreater,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Vsr,
    PValue,
}

/// Outcome of one verification probe.
///
/// `detected` is derived, never stored independently: a VSR detects above
/// its threshold, a p-value below it, both with strict inequality.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VerificationReport {
    pub run_id: String,
    pub method: String,
    pub metric_kind: MetricKind,
    pub value: f64,
    pub threshold: f64,
    pub detected: bool,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    pub config_digest: String,
}

impl VerificationReport {
    pub fn new(method: &str, metric_kind: MetricKind, value: f64, n_samples: usize) -> Self {
        let threshold = match metric_kind {
            MetricKind::Vsr => VSR_THRESHOLD,
            MetricKind::PValue => P_THRESHOLD,
        };
        VerificationReport {
            run_id: String::new(),
            method: method.to_string(),
            metric_kind,
            value,
            threshold,
            detected: detection_rule(metric_kind, value, threshold),
            n_samples,
            seeds: Vec::new(),
            config_digest: String::new(),
        }
    }
}

pub fn detection_rule(kind: MetricKind, value: f64, threshold: f64) -> bool {
    match kind {
        MetricKind::Vsr => value > threshold,
        MetricKind::PValue => value < threshold,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64], m: f64) -> f64 {
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

const P_FLOOR: f64 = 1e-300;
const P_CEIL: f64 = 1.0 - 1e-16;

/// One-tailed Welch T-test.
///
/// Returns p in (0,1). Both samples need at least two finite values. When
/// both variances vanish and the means are equal, p = 0.5 by convention.
pub fn welch_one_tailed(a: &[f64], b: &[f64], alternative: Alternative) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Precondition(format!(
            "welch_one_tailed needs both samples of size >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Precondition(
            "welch_one_tailed requires finite samples".into(),
        ));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_var(a, ma), sample_var(b, mb));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 <= 0.0 {
        if ma == mb {
            return Ok(0.5);
        }
        // Zero spread with separated means: saturate in the tested direction.
        let favored = match alternative {
            Alternative::BGreater => mb > ma,
            Alternative::AGreater => ma > mb,
        };
        return Ok(if favored { P_FLOOR } else { P_CEIL });
    }
    let diff = match alternative {
        Alternative::BGreater => mb - ma,
        Alternative::AGreater => ma - mb,
    };
    let t = diff / se2.sqrt();
    let df = se2 * se2
        / ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
    Ok(student_t_sf(t, df).clamp(P_FLOOR, P_CEIL))
}

/// Survival function P(T > t) for Student's t with `df` degrees of freedom.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    if t.is_nan() || df <= 0.0 {
        return 0.5;
    }
    if t == 0.0 {
        return 0.5;
    }
    let x = df / (df + t * t);
    let tail = 0.5 * inc_beta_reg(x, 0.5 * df, 0.5);
    if t > 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Harmonic mean of p-values: n / sum(1/p_i). All inputs must lie in (0,1].
pub fn harmonic_mean_p(ps: &[f64]) -> Result<f64> {
    if ps.is_empty() {
        return Err(Error::Precondition("harmonic_mean_p needs inputs".into()));
    }
    if ps.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::Precondition(
            "harmonic_mean_p requires all p in (0,1]".into(),
        ));
    }
    let denom: f64 = ps.iter().map(|p| 1.0 / p).sum();
    Ok(ps.len() as f64 / denom)
}

/// Empirical label entropy in bits, with 0*log(0) := 0.
pub fn annotation_entropy(labels: &[usize], k: usize) -> f64 {
    assert!(!labels.is_empty(), "annotation_entropy needs labels");
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Mean losses along the linear path between two parameter vectors.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossBarrierProfile {
    pub alphas: Vec<f64>,
    pub train_losses: Vec<f64>,
    pub test_losses: Vec<f64>,
}

impl LossBarrierProfile {
    /// Peak training loss over interior grid points (0 < alpha < 1).
    pub fn interior_train_peak(&self) -> f64 {
        self.alphas
            .iter()
            .zip(&self.train_losses)
            .filter(|(a, _)| **a > 0.0 && **a < 1.0)
            .map(|(_, l)| *l)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn endpoint_train_losses(&self) -> (f64, f64) {
        let at = |target: f64| {
            self.alphas
                .iter()
                .position(|a| *a == target)
                .map(|i| self.train_losses[i])
                .expect("grid contains endpoints")
        };
        (at(0.0), at(1.0))
    }
}

/// Evaluate mean cross-entropy of interpolated models over a grid of mixing
/// coefficients. The grid must contain both endpoints.
pub fn loss_barrier(
    teacher: &Classifier,
    student: &Classifier,
    train: &LabeledDataset,
    test: &LabeledDataset,
    grid: &[f64],
) -> Result<LossBarrierProfile> {
    if !grid.contains(&0.0) || !grid.contains(&1.0) {
        return Err(Error::Precondition(
            "loss_barrier grid must contain 0 and 1".into(),
        ));
    }
    if grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::Precondition(
            "loss_barrier grid values must lie in [0,1]".into(),
        ));
    }
    let mut train_losses = Vec::with_capacity(grid.len());
    let mut test_losses = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let mid = crate::model::interpolate_params(teacher, student, alpha as f32)?;
        train_losses.push(mid.mean_loss(train)?);
        test_losses.push(mid.mean_loss(test)?);
    }
    Ok(LossBarrierProfile {
        alphas: grid.to_vec(),
        train_losses,
        test_losses,
    })
}

// ---------------------------------------------------------------------------
// Regularized incomplete beta via continued fraction (Lentz's method).
// ---------------------------------------------------------------------------

#[allow(clippy::excessive_precision)]
fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9.
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const MAX_ITER: usize = 400;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-30;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn inc_beta_reg(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(x, a, b) / a
    } else {
        1.0 - front * beta_cf(1.0 - x, b, a) / b
    }
}
