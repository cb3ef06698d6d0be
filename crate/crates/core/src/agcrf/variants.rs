use serde::Serialize;

use super::unrolled::{run_unrolled_from, run_unrolled_inference};
use super::{AgCrfParams, ScaleSet, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Side-by-side run of FLAG and PLAG on the same features.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantReport {
    /// Max-abs difference of the refined features, per scale.
    pub output_divergence: Vec<f64>,
    /// Max-abs difference of the first-iteration gates, per pair.
    pub first_alpha_divergence: Vec<f64>,
    /// Max-abs change of FLAG's first-iteration gates under a perturbed start.
    pub flag_alpha_shift: f64,
    /// Max-abs change of PLAG's first-iteration gates under a perturbed start.
    pub plag_alpha_shift: f64,
}

impl VariantReport {
    /// PLAG gates did not move when the starting estimate was perturbed.
    pub fn plag_invariant(&self) -> bool {
        self.plag_alpha_shift == 0.0
    }
}

/// Fixed smooth perturbation of magnitude up to `amp`.
pub fn perturbation(f: &ScaleSet, amp: f64) -> ScaleSet {
    let scales = f
        .scales()
        .iter()
        .enumerate()
        .map(|(s, t)| {
            let mut out = t.clone();
            let (c, h, w) = t.shape();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let phase = 0.7 + 1.3 * s as f64 + 1.7 * ch as f64 + 0.9 * y as f64 + 1.1 * x as f64;
                        out.set(ch, y, x, t.get(ch, y, x) + amp * phase.sin());
                    }
                }
            }
            out
        })
        .collect();
    ScaleSet::new(scales).expect("same layout as input")
}

fn max_diff(a: &[Tensor], b: &[Tensor]) -> Result<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).collect()
}

fn first_alpha(f: &ScaleSet, p: &AgCrfParams, init: Option<&ScaleSet>) -> Result<Vec<Tensor>> {
    let one = p.clone().with_iterations(1);
    Ok(run_unrolled_from(f, &one, &mut Tape::new(), init)?.alpha)
}

pub fn compare_variants(
    f: &ScaleSet,
    p_flag: &AgCrfParams,
    p_plag: &AgCrfParams,
) -> Result<VariantReport> {
    if p_flag.variant != Variant::Flag || p_plag.variant != Variant::Plag {
        return Err(Error::invalid(format!(
            "expected flag and plag parameters, got {} and {}",
            p_flag.variant, p_plag.variant
        )));
    }
    if p_flag.channels() != p_plag.channels() || p_flag.kernel_size() != p_plag.kernel_size() {
        return Err(Error::shape("compare_variants", "parameter layouts differ"));
    }
    let flag = run_unrolled_inference(f, p_flag, &mut Tape::new())?;
    let plag = run_unrolled_inference(f, p_plag, &mut Tape::new())?;
    let moved = perturbation(f, 0.25);
    let shift = |p: &AgCrfParams| -> Result<f64> {
        let base = first_alpha(f, p, None)?;
        let pert = first_alpha(f, p, Some(&moved))?;
        Ok(max_diff(&base, &pert)?.into_iter().fold(0.0, f64::max))
    };
    Ok(VariantReport {
        output_divergence: max_diff(&flag.hbar, &plag.hbar)?,
        first_alpha_divergence: max_diff(&first_alpha(f, p_flag, None)?, &first_alpha(f, p_plag, None)?)?,
        flag_alpha_shift: shift(p_flag)?,
        plag_alpha_shift: shift(p_plag)?,
    })
}
