//! End-to-end gradient check: loss of the full network against central
//! differences on sampled coordinates of every parameter tensor.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{rel_err, OracleReport, TOL_GRAD_REL};
use crate::error::Result;
use crate::evalkit::Mask;
use crate::mhnet::{preprocess, Model, ModelConfig};
use crate::tensor::{ParamShape, Tape, Tensor};
use crate::train::{deep_supervised_loss, LossConfig};

/// Step for the model-level central differences.
pub const MODEL_FD_STEP: f64 = 1e-4;

/// A coordinate whose central differences at `h` and `2h` differ by more
/// than this fraction of the gradient, plus the rounding allowance, has a
/// ReLU or max-pool kink inside the stencil; it is re-measured with a ten
/// times smaller step.
pub const KINK_RATIO: f64 = 1e-4;

/// Rounding allowance of one difference quotient, in units of
/// `|loss| * f64::EPSILON / h`.
pub const ROUNDING_ULPS: f64 = 64.0;

/// Step reductions tried on a kinked coordinate.
pub const MAX_REFINEMENTS: usize = 3;

/// Gradient-check setup.
#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    pub config: ModelConfig,
    pub side: usize,
    pub coords_per_tensor: usize,
    /// Uniform range of the otherwise zero-initialised AG-CRF kernels.
    pub crf_scale: f64,
    /// Uniform range of the otherwise zero biases. With zero biases a
    /// pixel whose inputs are all zero sits exactly on a ReLU kink.
    pub bias_scale: f64,
    pub step: f64,
    pub seed: u64,
}

impl ModelGradCheck {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        ModelGradCheck {
            config,
            side: 16,
            coords_per_tensor: 50,
            crf_scale: 0.2,
            bias_scale: 0.1,
            step: MODEL_FD_STEP,
            seed,
        }
    }
}

fn loss_of(model: &Model, image: &Tensor, gt: &Mask, cfg: &LossConfig) -> Result<f64> {
    let p = model.predict(image)?;
    let deep = model.config().ablation.deep_supervision();
    Ok(deep_supervised_loss(&p.heads, &p.fused, gt, cfg, deep)?.total)
}

/// One report per parameter tensor: worst relative error over its sampled
/// coordinates.
pub fn check_model_gradients(check: &ModelGradCheck) -> Result<Vec<OracleReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(check.seed);
    let mut model = Model::new(check.config.clone())?;
    let crf_ids: Vec<_> = model
        .crf_blocks()
        .iter()
        .flat_map(|b| b.pairs.iter().flat_map(|p| p.2))
        .collect();
    for id in crf_ids {
        for v in model.params_mut().values_mut(id) {
            *v = rng.gen_range(-check.crf_scale..check.crf_scale);
        }
    }
    let bias_ids: Vec<_> = model
        .params()
        .ids()
        .filter(|&id| matches!(model.params().entry(id).shape, ParamShape::Bias(_)))
        .collect();
    for id in bias_ids {
        for v in model.params_mut().values_mut(id) {
            *v = rng.gen_range(-check.bias_scale..check.bias_scale);
        }
    }
    let n = check.side;
    let image = Tensor::random(&mut rng, check.config.front.in_channels, n, n, 0.0, 1.0);
    let bits: Vec<bool> = (0..n * n).map(|_| rng.gen_bool(0.2)).collect();
    let gt = Mask::new(n, n, bits)?;
    let loss_cfg = LossConfig::default();

    let mut tape = Tape::new();
    let x = tape.input(&preprocess(&image));
    let out = model.forward(&mut tape, x)?;
    let heads: Vec<Tensor> = out.heads.iter().map(|&v| tape.value(v)).collect();
    let fused = tape.value(out.fused);
    let deep = model.config().ablation.deep_supervision();
    let dl = deep_supervised_loss(&heads, &fused, &gt, &loss_cfg, deep)?;
    let mut seeds = vec![(out.fused, &dl.fused_grad)];
    if deep {
        seeds.extend(out.heads.iter().copied().zip(&dl.head_grads));
    }
    let grads = tape.backward(&seeds)?;

    let base = dl.total;
    let ids: Vec<_> = model.params().ids().collect();
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let len = model.params().values(id).len();
        let analytic: Vec<f64> = grads
            .param(id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; len]);
        let picks = sample(&mut rng, len, check.coords_per_tensor.min(len));
        let (mut worst_abs, mut worst_rel) = (0.0f64, 0.0f64);
        let mut refined = 0;
        for i in picks.iter() {
            let orig = model.params().values(id)[i];
            let mut h = check.step;
            let mut numeric;
            let mut attempt = 0;
            let central = |model: &mut Model, h: f64| -> Result<f64> {
                model.params_mut().values_mut(id)[i] = orig + h;
                let up = loss_of(model, &image, &gt, &loss_cfg)?;
                model.params_mut().values_mut(id)[i] = orig - h;
                let down = loss_of(model, &image, &gt, &loss_cfg)?;
                model.params_mut().values_mut(id)[i] = orig;
                Ok((up - down) / (2.0 * h))
            };
            loop {
                numeric = central(&mut model, h)?;
                let wide = central(&mut model, 2.0 * h)?;
                let rounding = ROUNDING_ULPS * f64::EPSILON * base.abs() / h;
                let kinked = (numeric - wide).abs() > KINK_RATIO * numeric.abs() + rounding;
                if !kinked || attempt == MAX_REFINEMENTS {
                    break;
                }
                attempt += 1;
                h /= 10.0;
            }
            refined += usize::from(attempt > 0);
            worst_abs = worst_abs.max((analytic[i] - numeric).abs());
            worst_rel = worst_rel.max(rel_err(analytic[i], numeric));
        }
        reports.push(OracleReport::new(
            "model_gradient",
            format!(
                "{} {} ({} of {len} coords, {refined} refined)",
                model.config().ablation,
                model.params().entry(id).name,
                check.coords_per_tensor.min(len)
            ),
            worst_abs,
            worst_rel,
            TOL_GRAD_REL,
            true,
        ));
    }
    Ok(reports)
}
