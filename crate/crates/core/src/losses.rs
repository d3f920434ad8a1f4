//! Disease and gender objectives.

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::N_CLASSES;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Focusing exponent of the modulating factor.
    pub gamma: f64,
    pub alpha: f64,
    /// Label-smoothing mass spread uniformly over the classes.
    pub epsilon: f64,
    pub lambda_adv: f64,
    /// When set, the gender loss enters the total with weight 1 and the
    /// adversarial strength is carried only by the gradient reversal scale.
    /// Otherwise `lambda_adv` weights the gender loss and also scales the
    /// reversal, so the encoder sees `lambda_adv^2`.
    pub grl_single_lambda: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
            epsilon: 0.1,
            lambda_adv: 0.1,
            grl_single_lambda: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "epsilon must be in [0, 1), got {}",
                self.epsilon
            )));
        }
        if !(self.lambda_adv.is_finite() && self.lambda_adv >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_adv must be finite and >= 0, got {}",
                self.lambda_adv
            )));
        }
        Ok(())
    }

    /// Weight of the gender loss in the total objective.
    pub fn gender_weight(&self) -> f64 {
        if self.grl_single_lambda {
            1.0
        } else {
            self.lambda_adv
        }
    }
}

fn check_finite(tape: &Tape, v: Var, op: &'static str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// `-alpha * (1 - p_t)^gamma * log((1 - eps) * p_t + eps / C)` with
/// `p = softmax(logits)`. The modulating factor uses the unsmoothed `p_t`.
pub fn focal_smooth_loss(
    tape: &mut Tape,
    logits: Var,
    true_class: usize,
    cfg: &LossConfig,
) -> Result<Var> {
    check_finite(tape, logits, "focal_smooth_loss")?;
    let c = tape.value(logits).numel();
    if true_class >= c {
        return Err(Error::LabelOutOfRange {
            what: "disease class",
            value: true_class,
        });
    }
    let p = tape.softmax(logits);
    let p_t = tape.select(p, true_class)?;
    let one_minus = tape.affine(p_t, -1.0, 1.0);
    let modulating = tape.powf(one_minus, cfg.gamma);
    let smoothed = tape.affine(p_t, 1.0 - cfg.epsilon, cfg.epsilon / c as f64);
    let log_smoothed = tape.log(smoothed);
    let prod = tape.mul(modulating, log_smoothed)?;
    Ok(tape.scale(prod, -cfg.alpha))
}

/// Two-way cross-entropy for the gender head.
pub fn gender_loss(tape: &mut Tape, logits: Var, gender: usize) -> Result<Var> {
    cross_entropy(tape, logits, gender, "gender_loss")
}

pub fn cross_entropy(
    tape: &mut Tape,
    logits: Var,
    target: usize,
    op: &'static str,
) -> Result<Var> {
    check_finite(tape, logits, op)?;
    if target >= tape.value(logits).numel() {
        return Err(Error::LabelOutOfRange {
            what: "target",
            value: target,
        });
    }
    let ls = tape.log_softmax(logits);
    let picked = tape.select(ls, target)?;
    Ok(tape.scale(picked, -1.0))
}

/// `disease + weight * gender`.
pub fn total_loss(tape: &mut Tape, disease: Var, gender: Var, weight: f64) -> Result<Var> {
    if tape.value(disease).numel() != 1 || tape.value(gender).numel() != 1 {
        return Err(Error::shape("total_loss", "both losses must be scalar"));
    }
    let weighted = tape.scale(gender, weight);
    tape.add(disease, weighted)
}

/// Forward value of the disease loss without a tape.
pub fn focal_smooth_value(logits: &[f64], true_class: usize, cfg: &LossConfig) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    let p_t = (logits[true_class] - m).exp() / z;
    let smoothed = (1.0 - cfg.epsilon) * p_t + cfg.epsilon / N_CLASSES as f64;
    -cfg.alpha * (1.0 - p_t).powf(cfg.gamma) * smoothed.ln()
}
