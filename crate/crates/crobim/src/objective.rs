//! Combined cross-entropy + Dice training objective on the upsampled
//! logits: `L = λ·L_ce + (1−λ)·L_dice`.

use crate::config::ModelConfig;
use crate::error::{CrobimError, Result};
use crate::tape::{Graph, Var};
use ndarray::Array2;

pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub ce_term: f64,
    pub dice_term: f64,
    pub lambda: f64,
}

impl LossReport {
    /// total = λ·ce + (1−λ)·dice, everything non-negative, dice in [0, 1].
    pub fn check_invariants(&self) -> bool {
        let recomposed = self.lambda * self.ce_term + (1.0 - self.lambda) * self.dice_term;
        (self.total - recomposed).abs() <= 1e-12 * recomposed.abs().max(1.0)
            && self.total >= 0.0
            && self.ce_term >= 0.0
            && (0.0..=1.0).contains(&self.dice_term)
    }
}

fn check_shapes(g: &Graph, logits: Var, target: &Array2<f64>, context: &str) -> Result<()> {
    if g.shape(logits) != target.shape() {
        return Err(CrobimError::shape(
            context,
            format!("{:?}", target.shape()),
            format!("{:?}", g.shape(logits)),
        ));
    }
    if target.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(CrobimError::InvalidArgument(format!(
            "{context}: target must be binary"
        )));
    }
    Ok(())
}

/// Mean pixel-wise binary cross-entropy with logits, in the numerically
/// stable log-sum-exp form.
pub fn ce_loss(g: &mut Graph, logits: Var, target: &Array2<f64>) -> Result<Var> {
    check_shapes(g, logits, target, "objective.ce_loss")?;
    let per_pixel = g.bce_with_logits(logits, target.clone().into_dyn());
    Ok(g.mean_all(per_pixel))
}

/// Soft Dice loss `1 − (2Σp·y + ε)/(Σp + Σy + ε)` with `p = σ(logits)`.
pub fn dice_loss(g: &mut Graph, logits: Var, target: &Array2<f64>, eps: f64) -> Result<Var> {
    check_shapes(g, logits, target, "objective.dice_loss")?;
    if eps <= 0.0 {
        return Err(CrobimError::InvalidArgument(
            "dice smoothing must be positive".into(),
        ));
    }
    let p = g.sigmoid(logits);
    let y = g.constant(target.clone().into_dyn());
    let py = g.mul(p, y);
    let inter = g.sum_all(py);
    let psum = g.sum_all(p);
    let ysum: f64 = target.sum();
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, eps);
    let den = g.add_scalar(psum, ysum + eps);
    let ratio = g.div(num, den);
    let neg = g.scale(ratio, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Combined objective. Returns the scalar node (for backward) and the
/// realized values.
pub fn combined_loss(
    g: &mut Graph,
    logits: Var,
    target: &Array2<f64>,
    config: &ModelConfig,
) -> Result<(Var, LossReport)> {
    let lambda = config.lambda_ce;
    let ce = ce_loss(g, logits, target)?;
    let dice = dice_loss(g, logits, target, DICE_EPS)?;
    let ce_scaled = g.scale(ce, lambda);
    let dice_scaled = g.scale(dice, 1.0 - lambda);
    let total = g.add(ce_scaled, dice_scaled);
    let report = LossReport {
        total: g.scalar_value(total),
        ce_term: g.scalar_value(ce),
        dice_term: g.scalar_value(dice),
        lambda,
    };
    Ok((total, report))
}
