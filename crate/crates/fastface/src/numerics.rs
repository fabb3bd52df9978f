//! Shared numeric kernels: softmax, min-max normalization, quantiles, moments
//! and AdaIN-style modulation. Everything here is a pure function on immutable
//! inputs.
//!
//! Conventions fixed across the crate:
//! - normalization is global min-max over all entries, zero range maps to all
//!   zeros;
//! - quantiles interpolate linearly between order statistics;
//! - moments are population moments (divide by N);
//! - any division by a standard deviation or a range is guarded by
//!   [`EPS_GUARD`].

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Guard applied before dividing by a standard deviation or a value range.
pub const EPS_GUARD: f64 = 1e-8;

/// Population mean and standard deviation of a value set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapStats {
    pub mean: f64,
    pub std: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax of `m` with logits multiplied by `scale` (attention uses
/// `1/sqrt(d)`). Each output row sums to 1.
pub fn softmax_rows(m: &Matrix, scale: f64) -> Result<Matrix> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidParam {
            name: "scale",
            message: format!("must be a positive finite real, got {scale}"),
        });
    }
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            if !m.get(r, c).is_finite() {
                return Err(Error::NonFinite {
                    context: "softmax input",
                    row: r,
                    col: c,
                });
            }
        }
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let row_max = m
            .row(r)
            .iter()
            .fold(f64::NEG_INFINITY, |acc, &v| acc.max(v * scale));
        let mut sum = 0.0;
        for c in 0..m.cols() {
            let e = (m.get(r, c) * scale - row_max).exp();
            out.set(r, c, e);
            sum += e;
        }
        for c in 0..m.cols() {
            out.set(r, c, out.get(r, c) / sum);
        }
    }
    Ok(out)
}

/// Min-max normalization to [0, 1] over all entries. A value range at or
/// below the epsilon guard produces the all-zeros vector.
pub fn minmax_norm(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "minmax_norm requires at least one value");
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range <= EPS_GUARD {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| (x - lo) / range).collect()
}

/// p-th quantile with linear interpolation between order statistics.
pub fn quantile(v: &[f64], p: f64) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyInput { what: "quantile input" });
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParam {
            name: "p",
            message: format!("quantile level must lie in [0, 1], got {p}"),
        });
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite quantile input"));
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> MapStats {
    assert!(!v.is_empty(), "mean_std requires at least one value");
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    MapStats {
        mean,
        std: var.sqrt(),
    }
}

/// Re-imposes `source` statistics onto `x`: `s.std * (x - mean(x)) / std(x)
/// + s.mean`. Inputs whose std is at or below the guard collapse to the
/// source mean.
pub fn adain(source: MapStats, x: &[f64]) -> Vec<f64> {
    let stats = mean_std(x);
    if stats.std <= EPS_GUARD {
        return vec![source.mean; x.len()];
    }
    x.iter()
        .map(|&v| source.std * (v - stats.mean) / stats.std + source.mean)
        .collect()
}
