//! Decoupled cross-attention and the attention-map transforms.
//!
//! A decoupled block adds a second attention branch over identity tokens:
//!
//! ```text
//! z_new = Attention(z; Q, K, V) + lambda * f(A) V'
//! A     = softmax(Q K'^T / sqrt(d))
//! ```
//!
//! `f` is the pluggable map transform: identity, scale-power `s * A^p`, or
//! the scheduled softmask, a quantile-anchored double-sigmoid soft
//! binarization blended with an AdaIN-modulated copy of itself.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{adain, mean_std, minmax_norm, quantile, sigmoid, softmax_rows};

/// UNet part a decoupled block belongs to; transforms are gated per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockGroup {
    Down,
    Mid,
    Up,
}

impl BlockGroup {
    pub fn name(&self) -> &'static str {
        match self {
            BlockGroup::Down => "down",
            BlockGroup::Mid => "mid",
            BlockGroup::Up => "up",
        }
    }
}

/// A decoupled-branch attention map: query positions x identity tokens.
///
/// Maps are constructed from softmax output, so rows sum to 1 at that point;
/// transforms deliberately do not renormalize.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    probs: Matrix,
    block_group: BlockGroup,
    step_index: usize,
}

impl AttentionMap {
    /// Wraps a freshly softmaxed map, checking the row-sum contract.
    pub fn from_probs(probs: Matrix, block_group: BlockGroup, step_index: usize) -> Result<Self> {
        if probs.cols() == 0 {
            return Err(Error::EmptyInput {
                what: "attention map tokens",
            });
        }
        for r in 0..probs.rows() {
            let sum: f64 = probs.row(r).iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidParam {
                    name: "attention map",
                    message: format!("row {r} sums to {sum}, expected 1"),
                });
            }
        }
        Ok(Self {
            probs,
            block_group,
            step_index,
        })
    }

    /// Carries transformed values without the row-sum check.
    fn with_probs(&self, probs: Matrix) -> Self {
        Self {
            probs,
            block_group: self.block_group,
            step_index: self.step_index,
        }
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn block_group(&self) -> BlockGroup {
        self.block_group
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmKind {
    None,
    ScalePower,
    ScheduledSoftmask,
}

/// Attention-manipulation configuration.
///
/// Defaults carry the tuned values: power strength 1.3 with scale 1.45 on
/// the down part and 1.55 on the up part; softmask quantile 0.65 with
/// steepness 7.5 at the first step and 5.0 afterwards; blend weight 0.7.
/// `softmask_shift_up = true` moves values above the quantile toward the
/// upper plateau; flipping it reproduces the negated-shift alternative.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmConfig {
    #[serde(default = "default_kind")]
    pub kind: AmKind,
    #[serde(default = "default_s_down")]
    pub s_down: f64,
    #[serde(default = "default_s_up")]
    pub s_up: f64,
    #[serde(default = "default_p_power")]
    pub p_power: f64,
    #[serde(default = "default_quantile_p")]
    pub quantile_p: f64,
    #[serde(default = "default_d_first")]
    pub d_first: f64,
    #[serde(default = "default_d_rest")]
    pub d_rest: f64,
    #[serde(default = "default_s_first")]
    pub s_first: f64,
    #[serde(default = "default_blend_w")]
    pub blend_w: f64,
    #[serde(default = "default_target_groups")]
    pub target_groups: BTreeSet<BlockGroup>,
    #[serde(default = "default_true")]
    pub invert_first_token: bool,
    #[serde(default = "default_true")]
    pub adain_output: bool,
    #[serde(default = "default_true")]
    pub softmask_shift_up: bool,
}

fn default_kind() -> AmKind {
    AmKind::None
}
fn default_s_down() -> f64 {
    1.45
}
fn default_s_up() -> f64 {
    1.55
}
fn default_p_power() -> f64 {
    1.3
}
fn default_quantile_p() -> f64 {
    0.65
}
fn default_d_first() -> f64 {
    7.5
}
fn default_d_rest() -> f64 {
    5.0
}
fn default_s_first() -> f64 {
    1.0
}
fn default_blend_w() -> f64 {
    0.7
}
fn default_target_groups() -> BTreeSet<BlockGroup> {
    [BlockGroup::Down, BlockGroup::Up].into_iter().collect()
}
fn default_true() -> bool {
    true
}

impl Default for AmConfig {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            s_down: default_s_down(),
            s_up: default_s_up(),
            p_power: default_p_power(),
            quantile_p: default_quantile_p(),
            d_first: default_d_first(),
            d_rest: default_d_rest(),
            s_first: default_s_first(),
            blend_w: default_blend_w(),
            target_groups: default_target_groups(),
            invert_first_token: default_true(),
            adain_output: default_true(),
            softmask_shift_up: default_true(),
        }
    }
}

impl AmConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("quantile_p", self.quantile_p),
            ("blend_w", self.blend_w),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParam {
                    name,
                    message: format!("must lie in [0, 1], got {v}"),
                });
            }
        }
        for (name, v) in [
            ("s_down", self.s_down),
            ("s_up", self.s_up),
            ("d_first", self.d_first),
            ("d_rest", self.d_rest),
            ("s_first", self.s_first),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParam {
                    name,
                    message: format!("must be a positive finite real, got {v}"),
                });
            }
        }
        Ok(())
    }

    fn scale_for(&self, group: BlockGroup) -> f64 {
        match group {
            BlockGroup::Down => self.s_down,
            BlockGroup::Mid | BlockGroup::Up => self.s_up,
        }
    }
}

/// Projections and scale of one decoupled attention block.
#[derive(Debug, Clone)]
pub struct DecoupledBlockParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wk_id: Matrix,
    pub wv_id: Matrix,
    pub head_dim: usize,
    pub adapter_scale: f64,
    pub block_group: BlockGroup,
}

impl DecoupledBlockParams {
    fn validate(&self, z: &Matrix, ctx_text: &Matrix, ctx_id: &Matrix) -> Result<()> {
        let checks: [(&'static str, &Matrix, usize); 5] = [
            ("Wq", &self.wq, z.cols()),
            ("Wk", &self.wk, ctx_text.cols()),
            ("Wv", &self.wv, ctx_text.cols()),
            ("Wk_id", &self.wk_id, ctx_id.cols()),
            ("Wv_id", &self.wv_id, ctx_id.cols()),
        ];
        for (name, w, input_cols) in checks {
            if w.rows() != input_cols {
                return Err(Error::Projection {
                    projection: name,
                    expected: w.rows(),
                    found: input_cols,
                });
            }
        }
        for (name, w) in [("Wq", &self.wq), ("Wk", &self.wk), ("Wk_id", &self.wk_id)] {
            if w.cols() != self.head_dim {
                return Err(Error::Projection {
                    projection: name,
                    expected: self.head_dim,
                    found: w.cols(),
                });
            }
        }
        if !self.adapter_scale.is_finite() || self.adapter_scale < 0.0 {
            return Err(Error::InvalidParam {
                name: "adapter_scale",
                message: format!("must be finite and >= 0, got {}", self.adapter_scale),
            });
        }
        Ok(())
    }
}

/// Scale-power transform: elementwise `s * A^p`, no renormalization.
pub fn scale_power(a: &AttentionMap, s: f64, p: f64) -> AttentionMap {
    a.with_probs(a.probs.map(|v| s * v.powf(p)))
}

/// Quantile-anchored soft binarization:
/// `s * sigmoid(norm(sigmoid(d * (norm(A) - Q_p))))`, where the quantile is
/// taken in the normalized frame so a fraction `p` of entries lands below the
/// anchor. `shift_up` selects which side moves toward the upper plateau.
pub fn softmask(a: &AttentionMap, d: f64, p: f64, s: f64, shift_up: bool) -> Result<AttentionMap> {
    if !(d > 0.0) {
        return Err(Error::InvalidParam {
            name: "d",
            message: format!("softmask steepness must be positive, got {d}"),
        });
    }
    let normed = minmax_norm(a.probs.data());
    let anchor = quantile(&normed, p)?;
    let sign = if shift_up { 1.0 } else { -1.0 };
    let inner: Vec<f64> = normed
        .iter()
        .map(|&u| sigmoid(sign * d * (u - anchor)))
        .collect();
    let renormed = minmax_norm(&inner);
    let data: Vec<f64> = renormed.iter().map(|&u| s * sigmoid(u)).collect();
    let probs = Matrix::new(a.probs.rows(), a.probs.cols(), data)?;
    Ok(a.with_probs(probs))
}

/// Reflects the first token column within its own value range:
/// `x -> (max + min) - x`. Applying it twice restores the original map.
pub fn invert_first_token(a: &AttentionMap) -> AttentionMap {
    let (lo, hi) = a.probs.column_minmax(0);
    let mut probs = a.probs.clone();
    for r in 0..probs.rows() {
        probs.set(r, 0, (hi + lo) - probs.get(r, 0));
    }
    a.with_probs(probs)
}

/// Full scheduled-softmask transform: picks `(d, s)` by step (large steepness
/// and neutral scale at step 0), soft-binarizes, then blends the result with
/// an AdaIN copy modulated to the original map statistics. First-token
/// inversion, when enabled, wraps the whole transform.
pub fn scheduled_softmask(
    a: &AttentionMap,
    config: &AmConfig,
    step_index: usize,
) -> Result<AttentionMap> {
    config.validate()?;
    let (d, s) = if step_index == 0 {
        (config.d_first, config.s_first)
    } else {
        (config.d_rest, config.scale_for(a.block_group))
    };
    let input = if config.invert_first_token {
        invert_first_token(a)
    } else {
        a.clone()
    };
    let masked = softmask(&input, d, config.quantile_p, s, config.softmask_shift_up)?;
    let blended = blend_with_adain(input.probs.data(), &masked.probs, config.blend_w)?;
    let out = masked.with_probs(blended);
    Ok(if config.invert_first_token {
        invert_first_token(&out)
    } else {
        out
    })
}

/// `w * transformed + (1 - w) * AdaIN(stats(original), transformed)`.
fn blend_with_adain(original: &[f64], transformed: &Matrix, w: f64) -> Result<Matrix> {
    if w == 1.0 {
        return Ok(transformed.clone());
    }
    let stats = mean_std(original);
    let modulated = adain(stats, transformed.data());
    let data: Vec<f64> = transformed
        .data()
        .iter()
        .zip(&modulated)
        .map(|(&t, &m)| w * t + (1.0 - w) * m)
        .collect();
    Matrix::new(transformed.rows(), transformed.cols(), data)
}

/// AdaIN alignment of a transformed block output against the untransformed
/// one, interpolated by `w`.
pub fn adain_block_output(original: &Matrix, transformed: &Matrix, w: f64) -> Result<Matrix> {
    if original.rows() != transformed.rows() || original.cols() != transformed.cols() {
        return Err(Error::ShapeMismatch {
            context: "adain_block_output",
            expected: vec![original.rows(), original.cols()],
            found: vec![transformed.rows(), transformed.cols()],
        });
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidParam {
            name: "w",
            message: format!("blend weight must lie in [0, 1], got {w}"),
        });
    }
    blend_with_adain(original.data(), transformed, w)
}

/// Applies the configured transform to a map if its block group is targeted.
/// Returns the (possibly untouched) map and whether a transform ran.
pub fn apply_transform(
    map: &AttentionMap,
    config: &AmConfig,
    step_index: usize,
) -> Result<(AttentionMap, bool)> {
    if config.kind == AmKind::None || !config.target_groups.contains(&map.block_group()) {
        return Ok((map.clone(), false));
    }
    let out = match config.kind {
        AmKind::ScalePower => scale_power(map, config.scale_for(map.block_group()), config.p_power),
        AmKind::ScheduledSoftmask => scheduled_softmask(map, config, step_index)?,
        AmKind::None => unreachable!(),
    };
    Ok((out, true))
}

/// Pre- and post-transform maps captured from one decoupled evaluation.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub pre: AttentionMap,
    pub post: Option<AttentionMap>,
}

/// Two-branch attention of Eq-style decoupled blocks; trace captures the
/// decoupled map before and (when a transform ran) after manipulation.
pub fn decoupled_attention_traced(
    z: &Matrix,
    params: &DecoupledBlockParams,
    context_text: &Matrix,
    context_id: &Matrix,
    transform: &AmConfig,
    step_index: usize,
) -> Result<(Matrix, Option<AttentionTrace>)> {
    params.validate(z, context_text, context_id)?;
    let scale = 1.0 / (params.head_dim as f64).sqrt();

    let q = z.matmul(&params.wq)?;
    let k = context_text.matmul(&params.wk)?;
    let v = context_text.matmul(&params.wv)?;
    let text_attn = softmax_rows(&q.matmul(&k.transpose())?, scale)?;
    let text_out = text_attn.matmul(&v)?;

    if params.adapter_scale == 0.0 {
        return Ok((text_out, None));
    }

    let k_id = context_id.matmul(&params.wk_id)?;
    let v_id = context_id.matmul(&params.wv_id)?;
    let id_probs = softmax_rows(&q.matmul(&k_id.transpose())?, scale)?;
    let map = AttentionMap::from_probs(id_probs, params.block_group, step_index)?;

    let (transformed, applied) = apply_transform(&map, transform, step_index)?;
    let mut id_out = transformed.probs().matmul(&v_id)?;
    if applied && transform.kind == AmKind::ScheduledSoftmask && transform.adain_output {
        let raw_out = map.probs().matmul(&v_id)?;
        id_out = adain_block_output(&raw_out, &id_out, transform.blend_w)?;
    }

    let out = text_out.add(&id_out.scale(params.adapter_scale))?;
    let trace = AttentionTrace {
        pre: map,
        post: applied.then_some(transformed),
    };
    Ok((out, Some(trace)))
}

/// [`decoupled_attention_traced`] without map capture.
pub fn decoupled_attention(
    z: &Matrix,
    params: &DecoupledBlockParams,
    context_text: &Matrix,
    context_id: &Matrix,
    transform: &AmConfig,
    step_index: usize,
) -> Result<Matrix> {
    decoupled_attention_traced(z, params, context_text, context_id, transform, step_index)
        .map(|(out, _)| out)
}
