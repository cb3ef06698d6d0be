//! Class-balanced cross-entropy and its deep-supervised sum.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::evalkit::Mask;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-7;

/// Which class receives the weight `beta = |E+| / (|E+| + |E-|)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BetaConvention {
    /// Positives weighted by `beta`, negatives by `1 - beta`.
    AsWritten,
    /// Positives weighted by `1 - beta`, so the rare class counts more.
    #[default]
    Hed,
}

impl FromStr for BetaConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hed" => Ok(BetaConvention::Hed),
            "as_written" => Ok(BetaConvention::AsWritten),
            _ => Err(Error::invalid(format!(
                "unknown beta convention {s:?} (expected hed or as_written)"
            ))),
        }
    }
}

impl fmt::Display for BetaConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BetaConvention::Hed => "hed",
            BetaConvention::AsWritten => "as_written",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub beta: BetaConvention,
    pub epsilon: f64,
    /// One weight per head followed by the fused map; all ones when `None`.
    pub head_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: BetaConvention::Hed,
            epsilon: DEFAULT_EPSILON,
            head_weights: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::invalid(format!(
                "epsilon {} outside (0, 1e-3]",
                self.epsilon
            )));
        }
        if let Some(w) = &self.head_weights {
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid("head weights must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// (positive weight, negative weight) for a mask.
    pub fn class_weights(&self, gt: &Mask) -> Result<(f64, f64)> {
        let beta = class_balance(gt)?;
        Ok(match self.beta {
            BetaConvention::AsWritten => (beta, 1.0 - beta),
            BetaConvention::Hed => (1.0 - beta, beta),
        })
    }
}

/// `|E+| / (|E+| + |E-|)`.
pub fn class_balance(gt: &Mask) -> Result<f64> {
    let total = gt.height() * gt.width();
    if total == 0 {
        return Err(Error::invalid("ground truth has no pixels"));
    }
    Ok(gt.count() as f64 / total as f64)
}

/// Negative class-balanced log-likelihood of `pred` (a 1-channel map of
/// probabilities) and its gradient with respect to `pred`.
pub fn balanced_bce(pred: &Tensor, gt: &Mask, cfg: &LossConfig) -> Result<(f64, Tensor)> {
    cfg.validate()?;
    if pred.shape() != (1, gt.height(), gt.width()) {
        return Err(Error::shape(
            "balanced_bce",
            format!(
                "prediction {:?} vs ground truth {}x{}",
                pred.shape(),
                gt.height(),
                gt.width()
            ),
        ));
    }
    let (wp, wn) = cfg.class_weights(gt)?;
    let eps = cfg.epsilon;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for ((&p, &pos), g) in pred.data().iter().zip(gt.bits()).zip(&mut grad) {
        if p.is_nan() {
            return Err(Error::invalid("prediction contains NaN"));
        }
        let inside = p > eps && p < 1.0 - eps;
        let pc = p.clamp(eps, 1.0 - eps);
        if pos {
            loss -= wp * pc.ln();
            if inside {
                *g = -wp / p;
            }
        } else {
            loss -= wn * (1.0 - pc).ln();
            if inside {
                *g = wn / (1.0 - p);
            }
        }
    }
    Ok((loss, Tensor::new(1, gt.height(), gt.width(), grad)?))
}

/// Loss terms of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepLoss {
    pub total: f64,
    /// Unweighted loss per head.
    pub heads: Vec<f64>,
    pub fused: f64,
    /// Weighted gradients per head (zero when the head is unsupervised).
    pub head_grads: Vec<Tensor>,
    pub fused_grad: Tensor,
}

/// Sum of balanced losses over every head plus the fused map. With
/// `deep_supervision` off only the fused map contributes to `total` and
/// the gradients; the per-head values are still reported.
pub fn deep_supervised_loss(
    heads: &[Tensor],
    fused: &Tensor,
    gt: &Mask,
    cfg: &LossConfig,
    deep_supervision: bool,
) -> Result<DeepLoss> {
    if heads.is_empty() {
        return Err(Error::invalid("deep_supervised_loss needs at least one head"));
    }
    let weights = match &cfg.head_weights {
        Some(w) if w.len() != heads.len() + 1 => {
            return Err(Error::invalid(format!(
                "{} head weights for {} heads plus the fused map",
                w.len(),
                heads.len()
            )))
        }
        Some(w) => w.clone(),
        None => vec![1.0; heads.len() + 1],
    };
    let mut total = 0.0;
    let mut head_losses = Vec::with_capacity(heads.len());
    let mut head_grads = Vec::with_capacity(heads.len());
    for (h, &w) in heads.iter().zip(&weights) {
        let (l, g) = balanced_bce(h, gt, cfg)?;
        head_losses.push(l);
        if deep_supervision {
            total += w * l;
            head_grads.push(g.scale(w));
        } else {
            head_grads.push(Tensor::zeros(1, gt.height(), gt.width()));
        }
    }
    let wf = weights[heads.len()];
    let (lf, gf) = balanced_bce(fused, gt, cfg)?;
    total += wf * lf;
    Ok(DeepLoss {
        total,
        heads: head_losses,
        fused: lf,
        head_grads,
        fused_grad: gf.scale(wf),
    })
}
