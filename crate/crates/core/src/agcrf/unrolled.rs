//! Unrolled mean-field inference as differentiable tape ops.
//!
//! Each iteration updates every scale simultaneously:
//!
//! 1. `msg = L ⊗ h_e`
//! 2. `alpha = sigmoid(sign * (sum_c h_r ⊙ msg + l_e ⊗ h_e + l_r ⊗ h_r))`
//! 3. `h_r = f_r + a_r * sum_e alpha ⊙ msg`
//!
//! The linear part of the message is dropped. PLAG evaluates step 2 on the
//! observed features only, PLAIN_CRF holds every gate open.

use super::{AgCrfParams, GateSign, MeanFieldState, ScaleSet, UnaryWeight, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairVars {
    pub emitter: usize,
    pub receiver: usize,
    pub pairwise: Var,
    pub linear_emitter: Var,
    pub linear_receiver: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryVar {
    Fixed(f64),
    /// 1x1 kernel leaf or parameter.
    Conv(Var),
}

/// Kernel handles already placed on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct UnrolledKernels {
    pub pairs: Vec<PairVars>,
    pub unary: Vec<UnaryVar>,
}

impl UnrolledKernels {
    /// Records every kernel of `p` as a leaf on `tape`.
    pub fn from_params(tape: &mut Tape, p: &AgCrfParams) -> Self {
        let pairs = p
            .pairs()
            .iter()
            .map(|pk| PairVars {
                emitter: pk.emitter,
                receiver: pk.receiver,
                pairwise: tape.kernel(&pk.pairwise),
                linear_emitter: tape.kernel(&pk.linear_emitter),
                linear_receiver: tape.kernel(&pk.linear_receiver),
            })
            .collect();
        let unary = p
            .unary
            .iter()
            .map(|u| match u {
                UnaryWeight::Fixed(a) => UnaryVar::Fixed(*a),
                UnaryWeight::Learned(k) => UnaryVar::Conv(tape.kernel(k)),
            })
            .collect();
        UnrolledKernels { pairs, unary }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnrolledConfig {
    pub iterations: usize,
    pub variant: Variant,
    pub sign: GateSign,
}

impl From<&AgCrfParams> for UnrolledConfig {
    fn from(p: &AgCrfParams) -> Self {
        UnrolledConfig {
            iterations: p.iterations,
            variant: p.variant,
            sign: p.sign,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateVars {
    /// Gate statistic before the sigmoid; absent for PLAIN_CRF.
    pub pre: Option<Var>,
    pub alpha: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnrolledOutput {
    pub hbar: Vec<Var>,
    /// `gates[t][k]`: gates of iteration `t` for pair `k`.
    pub gates: Vec<Vec<GateVars>>,
}

fn gate_statistic(
    tape: &mut Tape,
    pv: &PairVars,
    h_r: Var,
    h_e: Var,
    msg: Var,
) -> Result<Var> {
    let prod = tape.mul(h_r, msg)?;
    let bilinear = tape.channel_sum(prod)?;
    let le = tape.conv2d(h_e, pv.linear_emitter, None)?;
    let lr = tape.conv2d(h_r, pv.linear_receiver, None)?;
    let s = tape.add(bilinear, le)?;
    tape.add(s, lr)
}

fn attention(
    tape: &mut Tape,
    pv: &PairVars,
    cfg: &UnrolledConfig,
    f: &[Var],
    h: &[Var],
    msg: Var,
) -> Result<GateVars> {
    let (e, r) = (pv.emitter, pv.receiver);
    let pre = match cfg.variant {
        Variant::PlainCrf => {
            let (_, hh, ww) = tape.shape(h[r]).expect("map");
            let alpha = tape.input(&Tensor::ones(1, hh, ww));
            return Ok(GateVars { pre: None, alpha });
        }
        Variant::Flag => gate_statistic(tape, pv, h[r], h[e], msg)?,
        Variant::Plag => {
            let msg_f = if h[e] == f[e] {
                msg
            } else {
                tape.conv2d(f[e], pv.pairwise, None)?
            };
            gate_statistic(tape, pv, f[r], f[e], msg_f)?
        }
    };
    let signed = match cfg.sign {
        GateSign::Plus => pre,
        GateSign::Minus => tape.scale(pre, -1.0)?,
    };
    let alpha = tape.sigmoid(signed)?;
    Ok(GateVars {
        pre: Some(pre),
        alpha,
    })
}

/// Records `cfg.iterations` unrolled steps on `tape`. `init` replaces the
/// starting estimate `hbar = f`.
pub fn unrolled_inference(
    tape: &mut Tape,
    f: &[Var],
    kernels: &UnrolledKernels,
    cfg: &UnrolledConfig,
    init: Option<&[Var]>,
) -> Result<UnrolledOutput> {
    let s = f.len();
    if kernels.unary.len() != s {
        return Err(Error::shape(
            "unrolled_inference",
            format!("{} unary weights for {s} scales", kernels.unary.len()),
        ));
    }
    if cfg.iterations == 0 {
        return Err(Error::invalid("iteration count must be >= 1"));
    }
    let mut h: Vec<Var> = match init {
        Some(i) if i.len() != s => {
            return Err(Error::shape(
                "unrolled_inference",
                format!("{} initial maps for {s} scales", i.len()),
            ))
        }
        Some(i) => i.to_vec(),
        None => f.to_vec(),
    };
    let mut gates = Vec::with_capacity(cfg.iterations);
    // PLAG gates depend on the observed features only
    let mut plag_cache: Vec<Option<GateVars>> = vec![None; kernels.pairs.len()];
    for t in 0..cfg.iterations {
        let (next, iter_gates) = tape.scoped(format!("iter{t}"), |tp| -> Result<_> {
            let mut iter_gates = Vec::with_capacity(kernels.pairs.len());
            let mut gated: Vec<Vec<Var>> = vec![Vec::new(); s];
            for (k, pv) in kernels.pairs.iter().enumerate() {
                let scope = format!("pair{}to{}", pv.emitter, pv.receiver);
                let (g, v) = tp.scoped(scope, |tp| -> Result<_> {
                    let msg = tp.scoped("message", |tp| tp.conv2d(h[pv.emitter], pv.pairwise, None))?;
                    let g = match plag_cache[k] {
                        Some(g) => g,
                        None => tp.scoped("attention", |tp| attention(tp, pv, cfg, f, &h, msg))?,
                    };
                    let v = tp.scoped("gating", |tp| tp.gate(g.alpha, msg))?;
                    Ok((g, v))
                })?;
                if cfg.variant == Variant::Plag {
                    plag_cache[k] = Some(g);
                }
                gated[pv.receiver].push(v);
                iter_gates.push(g);
            }
            let next = tp.scoped("update", |tp| -> Result<Vec<Var>> {
                let mut next = Vec::with_capacity(s);
                for r in 0..s {
                    let Some((&first, rest)) = gated[r].split_first() else {
                        next.push(f[r]);
                        continue;
                    };
                    let mut sum = first;
                    for &v in rest {
                        sum = tp.add(sum, v)?;
                    }
                    let weighted = match kernels.unary[r] {
                        UnaryVar::Fixed(a) => tp.scale(sum, a)?,
                        UnaryVar::Conv(k) => tp.conv2d(sum, k, None)?,
                    };
                    next.push(tp.add(f[r], weighted)?);
                }
                Ok(next)
            })?;
            Ok((next, iter_gates))
        })?;
        h = next;
        gates.push(iter_gates);
    }
    Ok(UnrolledOutput { hbar: h, gates })
}

/// Runs the unrolled path on concrete features and reads the result back.
pub fn run_unrolled_inference(
    f: &ScaleSet,
    p: &AgCrfParams,
    tape: &mut Tape,
) -> Result<MeanFieldState> {
    run_unrolled_from(f, p, tape, None)
}

/// As [`run_unrolled_inference`], starting from `init` instead of `F`.
pub fn run_unrolled_from(
    f: &ScaleSet,
    p: &AgCrfParams,
    tape: &mut Tape,
    init: Option<&ScaleSet>,
) -> Result<MeanFieldState> {
    p.check(f)?;
    if let Some(i) = init {
        if i.channels() != f.channels() || i.spatial() != f.spatial() {
            return Err(Error::shape(
                "run_unrolled_inference",
                "initial estimate does not match the features",
            ));
        }
    }
    let fv: Vec<Var> = f.scales().iter().map(|t| tape.input(t)).collect();
    let iv: Option<Vec<Var>> = init.map(|i| i.scales().iter().map(|t| tape.input(t)).collect());
    let kernels = UnrolledKernels::from_params(tape, p);
    let out = tape.scoped("agcrf", |tp| {
        unrolled_inference(tp, &fv, &kernels, &UnrolledConfig::from(p), iv.as_deref())
    })?;
    Ok(state_of(tape, &out))
}

/// Last-iteration estimates and gates as tensors.
pub fn state_of(tape: &Tape, out: &UnrolledOutput) -> MeanFieldState {
    MeanFieldState {
        hbar: out.hbar.iter().map(|&v| tape.value(v)).collect(),
        alpha: out
            .gates
            .last()
            .map(|g| g.iter().map(|g| tape.value(g.alpha)).collect())
            .unwrap_or_default(),
    }
}
