//! Classifier-free guidance and its decoupled variants, with few-step
//! scheduling and std-matching rescale.
//!
//! The decoupled form splits the conditional delta of plain CFG into two
//! additive guidance terms with independent strengths `alpha` and `beta`:
//!
//! ```text
//! DCG1 = uu + alpha * (text - uu)  + beta * (full - text)
//! DCG2 = uu + alpha * (id   - uu)  + beta * (full - id)
//! DCG3 = uu + alpha * (text - uu)  + beta * (id   - uu)
//! ```
//!
//! where `uu`, `text`, `id`, `full` are the noise predictions for the
//! (unconditional, text-only, id-only, fully conditioned) slots. Setting
//! `alpha = beta = w` in DCG1/DCG2 telescopes back to CFG with weight `w`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mean_std, EPS_GUARD};

/// One denoiser evaluation: a flat value buffer plus shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction {
    values: Vec<f64>,
    shape: Vec<usize>,
}

impl NoisePrediction {
    pub fn new(values: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "noise prediction",
                expected: shape.clone(),
                found: vec![values.len()],
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "noise prediction",
                row: 0,
                col: pos,
            });
        }
        Ok(Self { values, shape })
    }

    /// Rank-1 prediction over a flat vector.
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        let shape = vec![values.len()];
        Self::new(values, shape)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn check_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context,
                expected: self.shape.clone(),
                found: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Population std over all elements.
    pub fn std(&self) -> f64 {
        mean_std(&self.values).std
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceVariant {
    Cfg,
    Dcg1,
    Dcg2,
    Dcg3,
}

impl GuidanceVariant {
    pub fn name(&self) -> &'static str {
        match self {
            GuidanceVariant::Cfg => "CFG",
            GuidanceVariant::Dcg1 => "DCG1",
            GuidanceVariant::Dcg2 => "DCG2",
            GuidanceVariant::Dcg3 => "DCG3",
        }
    }
}

/// Guidance configuration for one sampling run.
///
/// Schedules are explicit per-step arrays sized to the sampler step count.
/// `w` is only read by the plain CFG variant; `phi` blends the rescaled
/// prediction back into the raw one (0 disables, 1 replaces).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub variant: GuidanceVariant,
    #[serde(default)]
    pub alpha_schedule: Vec<f64>,
    #[serde(default)]
    pub beta_schedule: Vec<f64>,
    #[serde(default = "default_w")]
    pub w: f64,
    #[serde(default = "default_phi")]
    pub phi: f64,
    #[serde(default)]
    pub rescale_enabled: bool,
}

fn default_w() -> f64 {
    1.0
}

fn default_phi() -> f64 {
    0.75
}

impl GuidanceConfig {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.phi) {
            return Err(Error::InvalidParam {
                name: "phi",
                message: format!("must lie in [0, 1], got {}", self.phi),
            });
        }
        if self.variant != GuidanceVariant::Cfg {
            if self.alpha_schedule.len() != total_steps {
                return Err(Error::ScheduleLength {
                    name: "alpha_schedule",
                    expected: total_steps,
                    found: self.alpha_schedule.len(),
                });
            }
            if self.beta_schedule.len() != total_steps {
                return Err(Error::ScheduleLength {
                    name: "beta_schedule",
                    expected: total_steps,
                    found: self.beta_schedule.len(),
                });
            }
        }
        Ok(())
    }
}

/// The per-step noise predictions a guidance combination can draw from.
/// Variants consume the subset they need; `eps_uu` is required by all.
#[derive(Debug, Clone)]
pub struct GuidanceInputs {
    pub eps_uu: NoisePrediction,
    pub eps_id: Option<NoisePrediction>,
    pub eps_text: Option<NoisePrediction>,
    pub eps_full: Option<NoisePrediction>,
}

impl GuidanceInputs {
    fn slot(
        &self,
        slot: &'static str,
        variant: GuidanceVariant,
    ) -> Result<&NoisePrediction> {
        let pred = match slot {
            "id" => self.eps_id.as_ref(),
            "text" => self.eps_text.as_ref(),
            "full" => self.eps_full.as_ref(),
            _ => unreachable!(),
        };
        let pred = pred.ok_or(Error::MissingPrediction {
            variant: variant.name(),
            slot,
        })?;
        self.eps_uu.check_same_shape(pred, "guidance inputs")?;
        Ok(pred)
    }
}

fn lincomb(base: &NoisePrediction, terms: &[(f64, &[f64], &[f64])]) -> NoisePrediction {
    // base + sum_k c_k * (pos_k - neg_k), shapes already validated
    let values = base
        .values
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            terms
                .iter()
                .fold(b, |acc, &(c, pos, neg)| acc + c * (pos[i] - neg[i]))
        })
        .collect();
    NoisePrediction {
        values,
        shape: base.shape.clone(),
    }
}

/// Plain classifier-free guidance: `uu + w * (full - uu)`.
pub fn cfg_combine(
    eps_uu: &NoisePrediction,
    eps_full: &NoisePrediction,
    w: f64,
) -> Result<NoisePrediction> {
    eps_uu.check_same_shape(eps_full, "cfg_combine")?;
    if w == 0.0 {
        return Ok(eps_uu.clone());
    }
    if w == 1.0 {
        return Ok(eps_full.clone());
    }
    Ok(lincomb(
        eps_uu,
        &[(w, eps_full.values(), eps_uu.values())],
    ))
}

/// The two realized guidance terms of a decoupled combination, in order.
/// These are the quantities whose stds drive [`dcg_rescale`].
pub fn dcg_terms(
    variant: GuidanceVariant,
    inputs: &GuidanceInputs,
    alpha: f64,
    beta: f64,
) -> Result<(NoisePrediction, NoisePrediction)> {
    let uu = &inputs.eps_uu;
    let zero = NoisePrediction {
        values: vec![0.0; uu.values.len()],
        shape: uu.shape.clone(),
    };
    let (a_pos, a_neg, b_pos, b_neg) = match variant {
        GuidanceVariant::Dcg1 => {
            let text = inputs.slot("text", variant)?;
            let full = inputs.slot("full", variant)?;
            (text, uu, full, text)
        }
        GuidanceVariant::Dcg2 => {
            let id = inputs.slot("id", variant)?;
            let full = inputs.slot("full", variant)?;
            (id, uu, full, id)
        }
        GuidanceVariant::Dcg3 => {
            let text = inputs.slot("text", variant)?;
            let id = inputs.slot("id", variant)?;
            (text, uu, id, uu)
        }
        GuidanceVariant::Cfg => {
            return Err(Error::InvalidParam {
                name: "variant",
                message: "CFG has no decoupled terms".into(),
            })
        }
    };
    let term_a = lincomb(&zero, &[(alpha, a_pos.values(), a_neg.values())]);
    let term_b = lincomb(&zero, &[(beta, b_pos.values(), b_neg.values())]);
    Ok((term_a, term_b))
}

/// Decoupled guidance combination: `uu + alpha * (. - .) + beta * (. - .)`
/// with the bracket contents selected by the variant.
pub fn dcg_combine(
    variant: GuidanceVariant,
    inputs: &GuidanceInputs,
    alpha: f64,
    beta: f64,
) -> Result<NoisePrediction> {
    let uu = &inputs.eps_uu;
    match variant {
        GuidanceVariant::Cfg => Err(Error::InvalidParam {
            name: "variant",
            message: "use cfg_combine for the CFG variant".into(),
        }),
        GuidanceVariant::Dcg1 => {
            let text = inputs.slot("text", variant)?;
            let full = inputs.slot("full", variant)?;
            if alpha == 1.0 && beta == 1.0 {
                // telescoping sum collapses exactly
                return Ok(full.clone());
            }
            Ok(lincomb(
                uu,
                &[
                    (alpha, text.values(), uu.values()),
                    (beta, full.values(), text.values()),
                ],
            ))
        }
        GuidanceVariant::Dcg2 => {
            let id = inputs.slot("id", variant)?;
            let full = inputs.slot("full", variant)?;
            if alpha == 1.0 && beta == 1.0 {
                return Ok(full.clone());
            }
            Ok(lincomb(
                uu,
                &[
                    (alpha, id.values(), uu.values()),
                    (beta, full.values(), id.values()),
                ],
            ))
        }
        GuidanceVariant::Dcg3 => {
            let text = inputs.slot("text", variant)?;
            let id = inputs.slot("id", variant)?;
            Ok(lincomb(
                uu,
                &[
                    (alpha, text.values(), uu.values()),
                    (beta, id.values(), uu.values()),
                ],
            ))
        }
    }
}

/// Std-matching rescale of a decoupled prediction, blended by `phi`.
///
/// `eps_rescaled = (std(term_a) + std(term_b)) / (2 * std(eps_dcg)) * eps_dcg`
/// and the result is `phi * eps_rescaled + (1 - phi) * eps_dcg`. The
/// denominator is floored at the epsilon guard.
pub fn dcg_rescale(
    eps_dcg: &NoisePrediction,
    term_a: &NoisePrediction,
    term_b: &NoisePrediction,
    phi: f64,
) -> Result<NoisePrediction> {
    eps_dcg.check_same_shape(term_a, "dcg_rescale")?;
    eps_dcg.check_same_shape(term_b, "dcg_rescale")?;
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::InvalidParam {
            name: "phi",
            message: format!("must lie in [0, 1], got {phi}"),
        });
    }
    if phi == 0.0 {
        return Ok(eps_dcg.clone());
    }
    let factor = (term_a.std() + term_b.std()) / (2.0 * eps_dcg.std()).max(EPS_GUARD);
    let values = eps_dcg
        .values
        .iter()
        .map(|&v| phi * (factor * v) + (1.0 - phi) * v)
        .collect();
    Ok(NoisePrediction {
        values,
        shape: eps_dcg.shape.clone(),
    })
}

/// One guided prediction at a given sampler step.
///
/// Scheduling only touches intermediate steps: at the first and last step
/// `alpha` and `beta` are clamped to 1 regardless of the schedule contents.
/// When enabled, the rescale blend is applied after the combination at every
/// step. The CFG variant uses the fixed weight `w` and ignores schedules and
/// rescaling.
pub fn scheduled_guidance(
    step_index: usize,
    total_steps: usize,
    config: &GuidanceConfig,
    inputs: &GuidanceInputs,
) -> Result<NoisePrediction> {
    if step_index >= total_steps {
        return Err(Error::StepOutOfRange {
            step: step_index,
            total: total_steps,
        });
    }
    config.validate(total_steps)?;
    if config.variant == GuidanceVariant::Cfg {
        let full = inputs.slot("full", GuidanceVariant::Cfg)?;
        return cfg_combine(&inputs.eps_uu, full, config.w);
    }
    let boundary = step_index == 0 || step_index + 1 == total_steps;
    let (alpha, beta) = if boundary {
        (1.0, 1.0)
    } else {
        (
            config.alpha_schedule[step_index],
            config.beta_schedule[step_index],
        )
    };
    let combined = dcg_combine(config.variant, inputs, alpha, beta)?;
    if config.rescale_enabled {
        let (term_a, term_b) = dcg_terms(config.variant, inputs, alpha, beta)?;
        dcg_rescale(&combined, &term_a, &term_b, config.phi)
    } else {
        Ok(combined)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng;
    use rand::Rng;

    fn pred(values: &[f64]) -> NoisePrediction {
        NoisePrediction::from_vec(values.to_vec()).unwrap()
    }

    fn random_pred(rng: &mut impl Rng, n: usize) -> NoisePrediction {
        pred(&(0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>())
    }

    fn inputs_from(rng: &mut impl Rng, n: usize) -> GuidanceInputs {
        GuidanceInputs {
            eps_uu: random_pred(rng, n),
            eps_id: Some(random_pred(rng, n)),
            eps_text: Some(random_pred(rng, n)),
            eps_full: Some(random_pred(rng, n)),
        }
    }

    #[test]
    fn cfg_arithmetic() {
        let uu = pred(&[0.0, 0.0]);
        let full = pred(&[1.0, 1.0]);
        let out = cfg_combine(&uu, &full, 2.0).unwrap();
        assert_eq!(out.values(), &[2.0, 2.0]);
        assert_eq!(cfg_combine(&uu, &full, 1.0).unwrap().values(), full.values());
        assert_eq!(cfg_combine(&uu, &full, 0.0).unwrap().values(), uu.values());
    }

    #[test]
    fn cfg_rejects_shape_mismatch() {
        let uu = pred(&[0.0, 0.0]);
        let full = pred(&[1.0]);
        assert!(cfg_combine(&uu, &full, 1.0).is_err());
    }

    #[test]
    fn dcg2_telescopes_at_unit_strengths() {
        let mut r = rng(7);
        let inputs = inputs_from(&mut r, 16);
        let out = dcg_combine(GuidanceVariant::Dcg2, &inputs, 1.0, 1.0).unwrap();
        assert_eq!(out.values(), inputs.eps_full.as_ref().unwrap().values());
    }

    #[test]
    fn dcg2_with_equal_strengths_reduces_to_cfg() {
        let mut r = rng(11);
        for _ in 0..50 {
            let inputs = inputs_from(&mut r, 32);
            let w = r.random_range(0.0..4.0);
            let dcg = dcg_combine(GuidanceVariant::Dcg2, &inputs, w, w).unwrap();
            let cfg =
                cfg_combine(&inputs.eps_uu, inputs.eps_full.as_ref().unwrap(), w).unwrap();
            for (a, b) in dcg.values().iter().zip(cfg.values()) {
                assert!((a - b).abs() <= 1e-12, "dcg {a} vs cfg {b}");
            }
        }
    }

    #[test]
    fn dcg2_scalar_example() {
        // uu + 1.5*(0.2 - 0) + 3.0*(0.5 - 0.2) = 0.3 + 0.9 = 1.2
        let inputs = GuidanceInputs {
            eps_uu: pred(&[0.0]),
            eps_id: Some(pred(&[0.2])),
            eps_text: None,
            eps_full: Some(pred(&[0.5])),
        };
        let out = dcg_combine(GuidanceVariant::Dcg2, &inputs, 1.5, 3.0).unwrap();
        assert!((out.values()[0] - 1.2).abs() <= 1e-12);
    }

    #[test]
    fn missing_slot_names_variant() {
        let inputs = GuidanceInputs {
            eps_uu: pred(&[0.0]),
            eps_id: None,
            eps_text: Some(pred(&[0.1])),
            eps_full: Some(pred(&[0.2])),
        };
        let err = dcg_combine(GuidanceVariant::Dcg2, &inputs, 1.0, 2.0).unwrap_err();
        assert!(err.to_string().contains("DCG2"));
    }

    #[test]
    fn rescale_unit_factor_is_identity() {
        let mut r = rng(3);
        let e: Vec<f64> = (0..64).map(|_| r.random_range(-1.0..1.0)).collect();
        let eps = pred(&e);
        for &phi in &[0.0, 0.3, 1.0] {
            let out = dcg_rescale(&eps, &eps, &eps, phi).unwrap();
            for (a, b) in out.values().iter().zip(eps.values()) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn rescale_phi_zero_is_bit_identical() {
        let mut r = rng(5);
        let eps = random_pred(&mut r, 32);
        let a = random_pred(&mut r, 32);
        let b = random_pred(&mut r, 32);
        let out = dcg_rescale(&eps, &a, &b, 0.0).unwrap();
        assert_eq!(out.values(), eps.values());
    }

    #[test]
    fn rescale_std_contract() {
        // factor (1 + 3) / (2 * 4) = 0.5 applied to a std-4 vector
        let eps = pred(&[4.0, -4.0, 4.0, -4.0]);
        let a = pred(&[1.0, -1.0, 1.0, -1.0]);
        let b = pred(&[3.0, -3.0, 3.0, -3.0]);
        let out = dcg_rescale(&eps, &a, &b, 1.0).unwrap();
        assert!((out.std() - 2.0).abs() <= 1e-6, "std {}", out.std());
    }

    #[test]
    fn boundary_steps_clamp_to_full() {
        let mut r = rng(19);
        let inputs = inputs_from(&mut r, 8);
        let config = GuidanceConfig {
            variant: GuidanceVariant::Dcg2,
            alpha_schedule: vec![9.0, 1.5, 1.5, -3.0],
            beta_schedule: vec![-7.0, 3.0, 3.0, 100.0],
            w: 1.0,
            phi: 0.75,
            rescale_enabled: false,
        };
        let full = inputs.eps_full.as_ref().unwrap();
        let first = scheduled_guidance(0, 4, &config, &inputs).unwrap();
        let last = scheduled_guidance(3, 4, &config, &inputs).unwrap();
        assert_eq!(first.values(), full.values());
        assert_eq!(last.values(), full.values());
    }

    #[test]
    fn intermediate_step_composes_combine_and_rescale() {
        let mut r = rng(23);
        let inputs = inputs_from(&mut r, 16);
        let config = GuidanceConfig {
            variant: GuidanceVariant::Dcg2,
            alpha_schedule: vec![1.0, 1.5, 1.5, 1.0],
            beta_schedule: vec![1.0, 3.0, 3.0, 1.0],
            w: 1.0,
            phi: 0.75,
            rescale_enabled: true,
        };
        let got = scheduled_guidance(1, 4, &config, &inputs).unwrap();
        let combined = dcg_combine(GuidanceVariant::Dcg2, &inputs, 1.5, 3.0).unwrap();
        let (ta, tb) = dcg_terms(GuidanceVariant::Dcg2, &inputs, 1.5, 3.0).unwrap();
        let expected = dcg_rescale(&combined, &ta, &tb, 0.75).unwrap();
        assert_eq!(got.values(), expected.values());
    }

    #[test]
    fn step_out_of_range_rejected() {
        let mut r = rng(29);
        let inputs = inputs_from(&mut r, 4);
        let config = GuidanceConfig {
            variant: GuidanceVariant::Dcg2,
            alpha_schedule: vec![1.0; 4],
            beta_schedule: vec![1.0; 4],
            w: 1.0,
            phi: 0.5,
            rescale_enabled: false,
        };
        assert!(scheduled_guidance(4, 4, &config, &inputs).is_err());
    }

    #[test]
    fn schedule_length_mismatch_rejected() {
        let mut r = rng(31);
        let inputs = inputs_from(&mut r, 4);
        let config = GuidanceConfig {
            variant: GuidanceVariant::Dcg2,
            alpha_schedule: vec![1.0; 3],
            beta_schedule: vec![1.0; 4],
            w: 1.0,
            phi: 0.5,
            rescale_enabled: false,
        };
        assert!(scheduled_guidance(1, 4, &config, &inputs).is_err());
    }

    #[test]
    fn combines_are_linear_in_each_input() {
        // finite random probes: scaling one input scales its contribution
        let mut r = rng(37);
        let n = 8;
        let uu = random_pred(&mut r, n);
        let id = random_pred(&mut r, n);
        let full = random_pred(&mut r, n);
        let zero = pred(&vec![0.0; n]);
        let base = GuidanceInputs {
            eps_uu: uu.clone(),
            eps_id: Some(id.clone()),
            eps_text: None,
            eps_full: Some(full.clone()),
        };
        let scaled = GuidanceInputs {
            eps_uu: uu.clone(),
            eps_id: Some(id.clone()),
            eps_text: None,
            eps_full: Some(pred(
                &full.values().iter().map(|v| 2.0 * v).collect::<Vec<_>>(),
            )),
        };
        let alpha = 1.3;
        let beta = 0.7;
        let a = dcg_combine(GuidanceVariant::Dcg2, &base, alpha, beta).unwrap();
        let b = dcg_combine(GuidanceVariant::Dcg2, &scaled, alpha, beta).unwrap();
        // difference must equal beta * (2*full - full) = beta * full
        let _ = zero;
        for i in 0..n {
            let diff = b.values()[i] - a.values()[i];
            assert!((diff - beta * full.values()[i]).abs() <= 1e-12);
        }
    }
}
