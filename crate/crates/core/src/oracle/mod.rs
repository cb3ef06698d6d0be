//! Brute-force references for the fast paths, and the seeded suites that
//! compare the two.

mod direct;
mod model_grad;

pub use model_grad::{check_model_gradients, ModelGradCheck, KINK_RATIO, MAX_REFINEMENTS, MODEL_FD_STEP, ROUNDING_ULPS};
pub use direct::{
    direct_conv, direct_deconv, direct_m, direct_maxpool, direct_message,
    direct_reference_inference, direct_sweep, finite_diff_coord, finite_diff_grad,
    fixed_point_residual, MAX_CHANNELS, MAX_SIDE,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agcrf::{
    self, AgCrfParams, MeanFieldState, ScaleSet, UnaryWeight, UnrolledConfig, UnrolledKernels,
};
use crate::error::{Error, Result};
use crate::tensor::{self, ConvKernel, Tape, Tensor, Var};

/// Max-abs tolerance for conv-vs-direct comparisons.
pub const TOL_DIRECT: f64 = 1e-6;
/// Relative tolerance for tape-vs-finite-difference gradients.
pub const TOL_GRAD_REL: f64 = 1e-3;
/// Step for central differences.
pub const FD_STEP: f64 = 1e-4;
/// Magnitudes below this count as absolute error in [`rel_err`].
pub const REL_FLOOR: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub op: String,
    pub instance: String,
    pub max_abs: f64,
    pub rel: f64,
    pub tolerance: f64,
    /// Whether `pass` compares `rel` (else `max_abs`) with `tolerance`.
    pub relative: bool,
    pub pass: bool,
}

impl OracleReport {
    /// `pass` is decided by `rel` when `relative`, else by `max_abs`.
    pub fn new(op: &str, instance: String, max_abs: f64, rel: f64, tolerance: f64, relative: bool) -> Self {
        let err = if relative { rel } else { max_abs };
        OracleReport {
            op: op.to_string(),
            instance,
            max_abs,
            rel,
            tolerance,
            relative,
            pass: err.is_finite() && err <= tolerance,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn rel_of(max_abs: f64, reference: &Tensor) -> f64 {
    max_abs / reference.max_abs().max(REL_FLOOR)
}

/// Random small AG-CRF instance: S in 2..=3, up to 4 channels, up to 8x8.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R) -> (ScaleSet, AgCrfParams, String) {
    let s = rng.gen_range(2..=3);
    let h = rng.gen_range(1..=8);
    let w = rng.gen_range(1..=8);
    let chans: Vec<usize> = (0..s).map(|_| rng.gen_range(1..=4)).collect();
    let k = if rng.gen_bool(0.8) { 3 } else { 1 };
    let f = ScaleSet::new(
        chans
            .iter()
            .map(|&c| Tensor::random(rng, c, h, w, -1.0, 1.0))
            .collect(),
    )
    .expect("aligned");
    let a = rng.gen_range(0.5..2.0);
    let mut p = AgCrfParams::random(rng, &chans, k, 0.5, a).expect("valid");
    p.sign = if rng.gen_bool(0.5) {
        agcrf::GateSign::Plus
    } else {
        agcrf::GateSign::Minus
    };
    let desc = format!("S={s} C={chans:?} {h}x{w} k={k} a={a:.3} sign={}", p.sign);
    (f, p, desc)
}

/// Scales every kernel so that, per receiver, the summed absolute kernel
/// mass over all emitters is `ratio * a`. With bounded features this makes a
/// sweep a contraction for small `ratio`.
pub fn into_contraction_regime(p: &mut AgCrfParams, ratio: f64) -> Result<()> {
    let s = p.num_scales();
    let mut worst: f64 = 0.0;
    for r in 0..s {
        let a = p.fixed_unary(r)?;
        let mass: f64 = p
            .pairs()
            .iter()
            .filter(|k| k.receiver == r)
            .map(|k| {
                let l1 = |k: &ConvKernel| k.values().iter().map(|v| v.abs()).sum::<f64>();
                l1(&k.pairwise) + l1(&k.linear_emitter) + l1(&k.linear_receiver)
            })
            .sum();
        worst = worst.max(mass / a);
    }
    if worst > 0.0 {
        p.scale_kernels(ratio / worst);
    }
    Ok(())
}

/// Names accepted by [`run_suite`].
pub const SUITES: &[&str] = &[
    "conv",
    "deconv",
    "maxpool",
    "compute_m",
    "message",
    "reference",
    "unrolled_grad",
    "fixed_point",
];

/// Runs `instances` seeded comparisons of one suite.
pub fn run_suite(name: &str, seed: u64, instances: usize) -> Result<Vec<OracleReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(instances);
    for _ in 0..instances {
        out.extend(match name {
            "conv" => check_conv(&mut rng)?,
            "deconv" => check_deconv(&mut rng)?,
            "maxpool" => check_maxpool(&mut rng)?,
            "compute_m" => check_compute_m(&mut rng)?,
            "message" => check_message(&mut rng)?,
            "reference" => check_reference(&mut rng)?,
            "unrolled_grad" => check_unrolled_grad(&mut rng)?,
            "fixed_point" => check_fixed_point(&mut rng)?,
            _ => {
                return Err(Error::invalid(format!(
                    "unknown oracle suite {name:?}; expected one of {SUITES:?}"
                )))
            }
        });
    }
    Ok(out)
}

fn random_kernel<R: Rng + ?Sized>(rng: &mut R, in_max: usize) -> (ConvKernel, usize, usize) {
    let o = rng.gen_range(1..=4);
    let i = rng.gen_range(1..=in_max);
    let k = rng.gen_range(1..=4);
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=(k / 2));
    let vals = (0..o * i * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (
        ConvKernel::new((o, i, k, k), stride, pad, vals).expect("valid kernel"),
        o,
        i,
    )
}

fn check_conv<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<OracleReport>> {
    let (k, _, i) = random_kernel(rng, 4);
    let h = rng.gen_range(4..=12);
    let w = rng.gen_range(4..=12);
    let x = Tensor::random(rng, i, h, w, -1.0, 1.0);
    let want = direct_conv(&x, &k)?;
    let got = tensor::conv2d(&x, &k)?;
    let d = got.max_abs_diff(&want)?;
    Ok(vec![OracleReport::new(
        "conv2d",
        format!("x={i}x{h}x{w} k={:?}/s{}p{}", k.shape(), k.stride(), k.padding()),
        d,
        rel_of(d, &want),
        TOL_DIRECT,
        false,
    )])
}

fn check_deconv<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<OracleReport>> {
    let (k, o, _) = random_kernel(rng, 4);
    let h = rng.gen_range(2..=8);
    let w = rng.gen_range(2..=8);
    let x = Tensor::random(rng, o, h, w, -1.0, 1.0);
    let want = direct_deconv(&x, &k)?;
    let got = tensor::deconv2d(&x, &k)?;
    let d = got.max_abs_diff(&want)?;
    Ok(vec![OracleReport::new(
        "deconv2d",
        format!("x={o}x{h}x{w} k={:?}/s{}p{}", k.shape(), k.stride(), k.padding()),
        d,
        rel_of(d, &want),
        TOL_DIRECT,
        false,
    )])
}

fn check_maxpool<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<OracleReport>> {
    let c = rng.gen_range(1..=4);
    let h = rng.gen_range(2..=12);
    let w = rng.gen_range(2..=12);
    let win = rng.gen_range(1..=2.min(h).min(w));
    let stride = rng.gen_range(1..=2);
    let x = Tensor::random(rng, c, h, w, -1.0, 1.0);
    let want = direct_maxpool(&x, win, stride)?;
    let d = tensor::maxpool(&x, win, stride)?.max_abs_diff(&want)?;
    Ok(vec![OracleReport::new(
        "maxpool",
        format!("x={c}x{h}x{w} window={win} stride={stride}"),
        d,
        rel_of(d, &want),
        TOL_DIRECT,
        false,
    )])
}

fn random_state<R: Rng + ?Sized>(rng: &mut R, f: &ScaleSet) -> MeanFieldState {
    let mut st = MeanFieldState::initial(f);
    for h in &mut st.hbar {
        let (c, hh, ww) = h.shape();
        *h = Tensor::random(rng, c, hh, ww, -1.0, 1.0);
    }
    st
}

fn check_pairs(
    rng: &mut (impl Rng + ?Sized),
    op: &str,
    fast: fn(&MeanFieldState, &AgCrfParams, usize, usize) -> Result<Tensor>,
    slow: fn(&MeanFieldState, &AgCrfParams, usize, usize) -> Result<Tensor>,
) -> Result<Vec<OracleReport>> {
    let (f, p, desc) = random_instance(rng);
    let st = random_state(rng, &f);
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for pk in p.pairs() {
        let want = slow(&st, &p, pk.emitter, pk.receiver)?;
        let got = fast(&st, &p, pk.emitter, pk.receiver)?;
        worst = worst.max(got.max_abs_diff(&want)?);
        scale = scale.max(want.max_abs());
    }
    Ok(vec![OracleReport::new(
        op,
        desc,
        worst,
        worst / scale.max(REL_FLOOR),
        TOL_DIRECT,
        false,
    )])
}

fn check_compute_m<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<OracleReport>> {
    check_pairs(rng, "compute_m", agcrf::compute_m, direct_m)
}

fn check_message<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<OracleReport>> {
    check_pairs(rng, "message", agcrf::reference_message, direct_message)
}

fn check_reference<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<OracleReport>> {
    let (f, p, desc) = random_instance(rng);
    let t = rng.gen_range(1..=3);
    let mut p = p.with_iterations(t);
    into_contraction_regime(&mut p, 0.5)?;
    let want = direct_reference_inference(&f, &p)?;
    let got = agcrf::run_reference_inference(&f, &p)?;
    let mut d = want.hbar_max_abs_diff(&got)?;
    for (a, b) in want.alpha.iter().zip(&got.alpha) {
        d = d.max(a.max_abs_diff(b)?);
    }
    let scale = want.hbar.iter().map(Tensor::max_abs).fold(0.0, f64::max);
    Ok(vec![OracleReport::new(
        "reference_inference",
        format!("{desc} T={t}"),
        d,
        d / scale.max(REL_FLOOR),
        TOL_DIRECT,
        false,
    )])
}

/// Loss used for AG-CRF gradient checks: a fixed random projection of every
/// refined scale.
fn projection_loss(tape: &mut Tape, hbar: &[Var], weights: &[Tensor]) -> Result<Var> {
    let mut terms = Vec::new();
    for (&h, w) in hbar.iter().zip(weights) {
        let wv = tape.input(w);
        let prod = tape.mul(h, wv)?;
        terms.push(tape.channel_sum(prod)?);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

fn unrolled_scalar(f: &ScaleSet, p: &AgCrfParams, weights: &[Tensor]) -> Result<f64> {
    let st = agcrf::run_unrolled_inference(f, p, &mut Tape::new())?;
    let mut total = 0.0;
    for (h, w) in st.hbar.iter().zip(weights) {
        total += h.dot(w)?;
    }
    Ok(total)
}

/// Kernel of `p` addressed by a flat slot index: 3 per pair, then learned unaries.
fn kernel_slot(p: &mut AgCrfParams, slot: usize) -> &mut ConvKernel {
    let np = p.pairs().len();
    if slot < 3 * np {
        let pk = &mut p.pairs_mut()[slot / 3];
        match slot % 3 {
            0 => &mut pk.pairwise,
            1 => &mut pk.linear_emitter,
            _ => &mut pk.linear_receiver,
        }
    } else {
        match &mut p.unary[slot - 3 * np] {
            UnaryWeight::Learned(k) => k,
            UnaryWeight::Fixed(_) => panic!("slot addresses a fixed unary weight"),
        }
    }
}

fn check_unrolled_grad<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<OracleReport>> {
    let (f, p, desc) = random_instance(rng);
    let variant = [agcrf::Variant::Flag, agcrf::Variant::Plag, agcrf::Variant::PlainCrf]
        [rng.gen_range(0..3)];
    let mut p = p.with_variant(variant).with_iterations(rng.gen_range(1..=2));
    for (s, c) in f.channels().into_iter().enumerate() {
        let vals = (0..c * c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        p.unary[s] = UnaryWeight::Learned(ConvKernel::pointwise(c, c, vals)?);
    }
    let weights: Vec<Tensor> = f
        .scales()
        .iter()
        .map(|t| {
            let (c, h, w) = t.shape();
            Tensor::random(rng, c, h, w, -1.0, 1.0)
        })
        .collect();

    let mut tape = Tape::new();
    let fv: Vec<Var> = f.scales().iter().map(|t| tape.input(t)).collect();
    let kernels = UnrolledKernels::from_params(&mut tape, &p);
    let out = agcrf::unrolled_inference(&mut tape, &fv, &kernels, &UnrolledConfig::from(&p), None)?;
    let loss = projection_loss(&mut tape, &out.hbar, &weights)?;
    let (_, h, w) = tape.shape(loss).expect("map");
    let grads = tape.backward(&[(loss, &Tensor::ones(1, h, w))])?;

    let mut slot_vars = Vec::new();
    for pv in &kernels.pairs {
        slot_vars.extend([pv.pairwise, pv.linear_emitter, pv.linear_receiver]);
    }
    for u in &kernels.unary {
        if let agcrf::UnaryVar::Conv(v) = u {
            slot_vars.push(*v);
        }
    }
    let mut worst_abs = 0.0f64;
    let mut worst_rel = 0.0f64;
    for (slot, &var) in slot_vars.iter().enumerate() {
        let base = kernel_slot(&mut p, slot).values().to_vec();
        let analytic = grads
            .get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; base.len()]);
        let numeric = finite_diff_grad(
            |v| {
                let mut q = p.clone();
                kernel_slot(&mut q, slot).values_mut().copy_from_slice(v);
                unrolled_scalar(&f, &q, &weights).expect("same shapes")
            },
            &base,
            FD_STEP,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            worst_abs = worst_abs.max((a - n).abs());
            worst_rel = worst_rel.max(rel_err(*a, *n));
        }
    }
    Ok(vec![OracleReport::new(
        "unrolled_gradient",
        format!("{desc} variant={variant} T={}", p.iterations),
        worst_abs,
        worst_rel,
        TOL_GRAD_REL,
        true,
    )])
}

/// Residual after each sweep in the contraction regime; reported as the
/// largest increase between consecutive sweeps (zero when monotone).
fn check_fixed_point<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<OracleReport>> {
    let (f, p, desc) = random_instance(rng);
    let mut p = p.with_iterations(1);
    into_contraction_regime(&mut p, CONTRACTION_RATIO)?;
    let residuals = residual_trace(&f, &p, FIXED_POINT_SWEEPS)?;
    let worst_increase = residuals
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);
    let strictly = residuals.windows(2).all(|w| w[1] < w[0] || w[0] == 0.0);
    let mut rep = OracleReport::new(
        "fixed_point_residual",
        format!(
            "{desc} residuals=[{}]",
            residuals.iter().map(|r| format!("{r:.3e}")).collect::<Vec<_>>().join(", ")
        ),
        worst_increase,
        0.0,
        0.0,
        false,
    );
    rep.pass = strictly;
    Ok(vec![rep])
}

/// Kernel mass per unit unary weight in the constructed contraction regime.
pub const CONTRACTION_RATIO: f64 = 0.2;
/// Sweeps over which residual monotonicity is checked. Chosen so residuals
/// stay well above rounding noise at [`CONTRACTION_RATIO`].
pub const FIXED_POINT_SWEEPS: usize = 8;

/// Fixed-point residual after each of `sweeps` reference sweeps.
pub fn residual_trace(f: &ScaleSet, p: &AgCrfParams, sweeps: usize) -> Result<Vec<f64>> {
    let mut state = MeanFieldState::initial(f);
    let mut out = Vec::with_capacity(sweeps);
    for _ in 0..sweeps {
        direct_sweep(f, p, &mut state)?;
        out.push(fixed_point_residual(f, p, &state)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_a_few_seeds() {
        for name in SUITES {
            let reps = run_suite(name, 11, 5).unwrap();
            assert_eq!(reps.len(), 5);
            for r in reps {
                assert!(r.pass, "{}", r.to_json_line());
            }
        }
        assert!(run_suite("bogus", 0, 1).is_err());
    }

    #[test]
    fn report_json_has_fields() {
        let r = OracleReport::new("x", "i".into(), 1e-9, 1e-7, 1e-6, false);
        let v: serde_json::Value = serde_json::from_str(&r.to_json_line()).unwrap();
        assert_eq!(v["op"], "x");
        assert_eq!(v["pass"], true);
        assert!(!OracleReport::new("x", "i".into(), f64::NAN, 0.0, 1e-6, false).pass);
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_err(0.0, 1e-9) - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn converged_reference_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let (f, p, _) = random_instance(&mut rng);
            let mut p = p.with_iterations(60);
            into_contraction_regime(&mut p, CONTRACTION_RATIO).unwrap();
            let st = agcrf::run_reference_inference(&f, &p).unwrap();
            assert!(fixed_point_residual(&f, &p, &st).unwrap() < 1e-8);
            // gates agree with the statistic recomputed from the final features
            for pk in p.pairs() {
                let idx = p.pair_index(pk.emitter, pk.receiver).unwrap();
                let again = agcrf::gate_expectation(
                    &agcrf::compute_m(&st, &p, pk.emitter, pk.receiver).unwrap(),
                    p.sign,
                );
                assert!(again.max_abs_diff(&st.alpha[idx]).unwrap() < 1e-8);
            }
        }
    }
}
