//! Closed-form mean-field inference, built from convolutions.

use super::{AgCrfParams, GateSign, MeanFieldState, PairKernels, ScaleSet, Schedule, Variant};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

fn pair<'a>(p: &'a AgCrfParams, e: usize, r: usize) -> Result<&'a PairKernels> {
    p.pair_index(e, r)
        .map(|i| &p.pairs()[i])
        .ok_or_else(|| Error::invalid(format!("no kernels for pair {e} -> {r}")))
}

/// Per receiver pixel, the sum over in-bounds footprint offsets of the
/// receiver-side linear kernel. `C_r` channels.
fn receiver_bias(pk: &PairKernels, h: usize, w: usize) -> Result<Tensor> {
    tensor::conv2d(&Tensor::ones(1, h, w), &pk.linear_receiver.swap_channels())
}

/// Gate statistic for the pair `e -> r`:
/// `M_i = sum_j h_r,i^T L_ij h_e,j + h_r,i^T l_r,ij + l_e,ij^T h_e,j`.
pub fn compute_m(state: &MeanFieldState, p: &AgCrfParams, e: usize, r: usize) -> Result<Tensor> {
    let pk = pair(p, e, r)?;
    let (he, hr) = (&state.hbar[e], &state.hbar[r]);
    let bilinear = tensor::mul(hr, &tensor::conv2d(he, &pk.pairwise)?)?.channel_sum();
    let emitter = tensor::conv2d(he, &pk.linear_emitter)?;
    let receiver = tensor::mul(hr, &receiver_bias(pk, hr.height(), hr.width())?)?.channel_sum();
    tensor::add(&tensor::add(&bilinear, &emitter)?, &receiver)
}

/// `alpha = sigmoid(sign * M)`.
pub fn gate_expectation(m: &Tensor, sign: GateSign) -> Tensor {
    let s = sign.factor();
    tensor::sigmoid(&m.map(|v| s * v))
}

/// Message `sum_j (L_ij h_e,j + l_r,ij)` sent from `e` to `r`.
pub fn reference_message(
    state: &MeanFieldState,
    p: &AgCrfParams,
    e: usize,
    r: usize,
) -> Result<Tensor> {
    let pk = pair(p, e, r)?;
    let he = &state.hbar[e];
    tensor::add(
        &tensor::conv2d(he, &pk.pairwise)?,
        &receiver_bias(pk, he.height(), he.width())?,
    )
}

/// `h = f + (1/a) * sum alpha ⊙ msg`.
pub fn mean_field_h_update(f: &Tensor, a: f64, incoming: &[(Tensor, Tensor)]) -> Result<Tensor> {
    if a == 0.0 || !a.is_finite() {
        return Err(Error::invalid(format!("unary weight must be nonzero and finite, got {a}")));
    }
    let mut acc = Tensor::zeros(f.channels(), f.height(), f.width());
    for (alpha, msg) in incoming {
        if msg.shape() != f.shape() {
            return Err(Error::shape(
                "mean_field_h_update",
                format!("message {:?} vs features {:?}", msg.shape(), f.shape()),
            ));
        }
        acc = tensor::add(&acc, &msg.gate(alpha)?)?;
    }
    tensor::add(f, &acc.scale(1.0 / a))
}

/// One sweep over all receivers in scale order.
pub(crate) fn reference_sweep(
    f: &ScaleSet,
    p: &AgCrfParams,
    state: &mut MeanFieldState,
) -> Result<()> {
    let prev = match p.schedule {
        Schedule::Sequential => None,
        Schedule::Simultaneous => Some(state.clone()),
    };
    for r in 0..f.len() {
        let mut incoming = Vec::new();
        for e in (0..f.len()).filter(|&e| e != r) {
            let idx = p.pair_index(e, r).expect("pair exists");
            let read = prev.as_ref().unwrap_or(&*state);
            let alpha = gate_expectation(&compute_m(read, p, e, r)?, p.sign);
            let msg = reference_message(read, p, e, r)?;
            state.alpha[idx] = alpha.clone();
            incoming.push((alpha, msg));
        }
        state.hbar[r] = mean_field_h_update(f.scale(r), p.fixed_unary(r)?, &incoming)?;
    }
    Ok(())
}

/// Starts from `hbar = F` and runs `p.iterations` sweeps.
pub fn run_reference_inference(f: &ScaleSet, p: &AgCrfParams) -> Result<MeanFieldState> {
    p.check(f)?;
    if p.variant != Variant::Flag {
        return Err(Error::invalid(format!(
            "closed-form inference is defined for the flag variant, got {}",
            p.variant
        )));
    }
    let mut state = MeanFieldState::initial(f);
    for _ in 0..p.iterations {
        reference_sweep(f, p, &mut state)?;
    }
    Ok(state)
}
