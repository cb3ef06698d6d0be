//! Attention-gated CRF over a set of aligned multi-scale feature maps.
//!
//! Every ordered pair of scales `(emitter -> receiver)` carries three kernels
//! over a shared square footprint:
//!
//! - `pairwise` (`C_r x C_e`): the bilinear coupling between hidden features,
//! - `linear_emitter` (`1 x C_e`): the linear term on the emitter's features,
//! - `linear_receiver` (`1 x C_r`): the linear term on the receiver's features.
//!
//! Per footprint offset `d` these form the block matrix
//! `K_d = [[L_d, lr_d], [le_d^T, 1]]` of the bilinear potential on
//! `(h, 1)`-augmented vectors. Two inference routes are provided: the
//! closed-form mean-field sweeps in [`reference`], and the differentiable
//! unrolled network in [`unrolled`].

pub mod energy;
pub mod reference;
pub mod unrolled;
pub mod variants;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvKernel, Tensor};

pub use energy::{pairwise_energy, total_energy, unary_energy, BilinearMatrix};
pub use reference::{
    compute_m, gate_expectation, mean_field_h_update, reference_message, run_reference_inference,
};
pub use unrolled::{
    run_unrolled_from, run_unrolled_inference, state_of, unrolled_inference, GateVars, PairVars,
    UnaryVar, UnrolledConfig, UnrolledKernels, UnrolledOutput,
};
pub use variants::{compare_variants, perturbation, VariantReport};

/// Which attention source the gates use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Gates computed from the hidden features.
    Flag,
    /// Gates computed from the observed features.
    Plag,
    /// Gates fixed open (ungated multi-scale CRF).
    PlainCrf,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Flag => "flag",
            Variant::Plag => "plag",
            Variant::PlainCrf => "plain_crf",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flag" => Ok(Variant::Flag),
            "plag" => Ok(Variant::Plag),
            "plain_crf" => Ok(Variant::PlainCrf),
            _ => Err(Error::invalid(format!("unknown AG-CRF variant {s:?}"))),
        }
    }
}

/// Sign applied to the gate statistic before the sigmoid.
///
/// `Minus` gives `alpha = sigmoid(-M)` as in the closed-form gate posterior;
/// `Plus` gives `alpha = sigmoid(+M)` as used by the unrolled network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateSign {
    #[default]
    Plus,
    Minus,
}

impl GateSign {
    pub fn factor(self) -> f64 {
        match self {
            GateSign::Plus => 1.0,
            GateSign::Minus => -1.0,
        }
    }
}

impl fmt::Display for GateSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateSign::Plus => "plus",
            GateSign::Minus => "minus",
        })
    }
}

impl FromStr for GateSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plus" | "+" => Ok(GateSign::Plus),
            "minus" | "-" => Ok(GateSign::Minus),
            _ => Err(Error::invalid(format!("unknown gate sign {s:?}"))),
        }
    }
}

/// Update order of the closed-form sweeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Schedule {
    /// Receivers in scale order, each seeing the estimates already updated
    /// earlier in the same sweep.
    #[default]
    Sequential,
    /// Every receiver reads the estimates of the previous sweep.
    Simultaneous,
}

/// Multi-scale features aligned to one spatial size.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSet {
    scales: Vec<Tensor>,
}

impl ScaleSet {
    pub fn new(scales: Vec<Tensor>) -> Result<Self> {
        let first = scales
            .first()
            .ok_or_else(|| Error::invalid("scale set needs at least one scale"))?;
        let (h, w) = (first.height(), first.width());
        for (s, t) in scales.iter().enumerate() {
            if (t.height(), t.width()) != (h, w) {
                return Err(Error::shape(
                    "ScaleSet::new",
                    format!(
                        "scale {s} is {}x{}, expected {h}x{w}",
                        t.height(),
                        t.width()
                    ),
                ));
            }
        }
        Ok(ScaleSet { scales })
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn scale(&self, s: usize) -> &Tensor {
        &self.scales[s]
    }

    pub fn scales(&self) -> &[Tensor] {
        &self.scales
    }

    pub fn into_scales(self) -> Vec<Tensor> {
        self.scales
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.scales[0].height(), self.scales[0].width())
    }

    pub fn channels(&self) -> Vec<usize> {
        self.scales.iter().map(Tensor::channels).collect()
    }
}

/// Per-scale unary weight `a`.
#[derive(Clone, Debug, PartialEq)]
pub enum UnaryWeight {
    Fixed(f64),
    /// `C x C` 1x1 convolution applied to the gated message sum.
    Learned(ConvKernel),
}

pub const DEFAULT_UNARY_WEIGHT: f64 = 0.1;

/// Kernels of one ordered scale pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairKernels {
    pub emitter: usize,
    pub receiver: usize,
    pub pairwise: ConvKernel,
    pub linear_emitter: ConvKernel,
    pub linear_receiver: ConvKernel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgCrfParams {
    channels: Vec<usize>,
    kernel_size: usize,
    pairs: Vec<PairKernels>,
    pub unary: Vec<UnaryWeight>,
    pub iterations: usize,
    pub variant: Variant,
    pub sign: GateSign,
    pub schedule: Schedule,
}

/// Ordered pairs `(emitter, receiver)`, receiver-major.
pub fn ordered_pairs(scales: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(scales * scales.saturating_sub(1));
    for r in 0..scales {
        for e in 0..scales {
            if e != r {
                out.push((e, r));
            }
        }
    }
    out
}

impl AgCrfParams {
    /// All kernels zero, `a` fixed, one iteration, FLAG, positive sign.
    pub fn zeros(channels: &[usize], kernel_size: usize, a: f64) -> Result<Self> {
        Self::build(channels, kernel_size, a, |_| 0.0)
    }

    /// Kernels uniform in `[-scale, scale)`.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        channels: &[usize],
        kernel_size: usize,
        scale: f64,
        a: f64,
    ) -> Result<Self> {
        Self::build(channels, kernel_size, a, |_| rng.gen_range(-scale..scale))
    }

    fn build(
        channels: &[usize],
        k: usize,
        a: f64,
        mut sample: impl FnMut(usize) -> f64,
    ) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::invalid("AG-CRF needs at least one scale"));
        }
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::invalid(format!("unary weight must be > 0, got {a}")));
        }
        let mut pairs = Vec::new();
        for (e, r) in ordered_pairs(channels.len()) {
            let (ce, cr) = (channels[e], channels[r]);
            let mut gen = |n: usize| (0..n).map(|i| sample(i)).collect::<Vec<_>>();
            pairs.push(PairKernels {
                emitter: e,
                receiver: r,
                pairwise: ConvKernel::same(cr, ce, k, gen(cr * ce * k * k))?,
                linear_emitter: ConvKernel::same(1, ce, k, gen(ce * k * k))?,
                linear_receiver: ConvKernel::same(1, cr, k, gen(cr * k * k))?,
            });
        }
        Ok(AgCrfParams {
            channels: channels.to_vec(),
            kernel_size: k,
            pairs,
            unary: vec![UnaryWeight::Fixed(a); channels.len()],
            iterations: 1,
            variant: Variant::Flag,
            sign: GateSign::Plus,
            schedule: Schedule::Sequential,
        })
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.variant = v;
        self
    }

    pub fn with_iterations(mut self, t: usize) -> Self {
        self.iterations = t;
        self
    }

    pub fn with_sign(mut self, s: GateSign) -> Self {
        self.sign = s;
        self
    }

    pub fn with_schedule(mut self, s: Schedule) -> Self {
        self.schedule = s;
        self
    }

    pub fn num_scales(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn pairs(&self) -> &[PairKernels] {
        &self.pairs
    }

    pub fn pairs_mut(&mut self) -> &mut [PairKernels] {
        &mut self.pairs
    }

    pub fn pair_index(&self, emitter: usize, receiver: usize) -> Option<usize> {
        self.pairs
            .iter()
            .position(|p| p.emitter == emitter && p.receiver == receiver)
    }

    /// Scalar unary weight of scale `s`; errors for a learned 1x1 weight.
    pub fn fixed_unary(&self, s: usize) -> Result<f64> {
        match &self.unary[s] {
            UnaryWeight::Fixed(a) => Ok(*a),
            UnaryWeight::Learned(_) => Err(Error::invalid(format!(
                "scale {s} has a learned unary weight; closed-form inference needs a scalar"
            ))),
        }
    }

    /// Multiplies every kernel by `s`.
    pub fn scale_kernels(&mut self, s: f64) {
        for p in &mut self.pairs {
            p.pairwise = p.pairwise.scaled(s);
            p.linear_emitter = p.linear_emitter.scaled(s);
            p.linear_receiver = p.linear_receiver.scaled(s);
        }
    }

    /// Checks that the parameters fit a scale set.
    pub fn check(&self, f: &ScaleSet) -> Result<()> {
        if f.channels() != self.channels {
            return Err(Error::shape(
                "AgCrfParams",
                format!(
                    "scale channels {:?} vs parameter channels {:?}",
                    f.channels(),
                    self.channels
                ),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iteration count must be >= 1"));
        }
        Ok(())
    }
}

/// Expected hidden features and gate expectations after inference.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldState {
    pub hbar: Vec<Tensor>,
    /// One 1-channel map per ordered pair, aligned with [`AgCrfParams::pairs`].
    pub alpha: Vec<Tensor>,
}

impl MeanFieldState {
    /// Unary-only starting point: `hbar = F`, all gates at one half.
    pub fn initial(f: &ScaleSet) -> Self {
        let (h, w) = f.spatial();
        let pairs = ordered_pairs(f.len()).len();
        MeanFieldState {
            hbar: f.scales().to_vec(),
            alpha: vec![Tensor::filled(1, h, w, 0.5); pairs],
        }
    }

    /// Largest absolute difference of the hidden features.
    pub fn hbar_max_abs_diff(&self, other: &MeanFieldState) -> Result<f64> {
        let mut m: f64 = 0.0;
        for (a, b) in self.hbar.iter().zip(&other.hbar) {
            m = m.max(a.max_abs_diff(b)?);
        }
        Ok(m)
    }
}

/// Binary gate per ordered pair and pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct GateAssignment {
    height: usize,
    width: usize,
    gates: Vec<Vec<u8>>,
}

impl GateAssignment {
    pub fn new(height: usize, width: usize, gates: Vec<Vec<u8>>) -> Result<Self> {
        for g in &gates {
            if g.len() != height * width {
                return Err(Error::shape(
                    "GateAssignment::new",
                    format!("{} gates for a {height}x{width} map", g.len()),
                ));
            }
            if g.iter().any(|&v| v > 1) {
                return Err(Error::invalid("gates must be 0 or 1"));
            }
        }
        Ok(GateAssignment {
            height,
            width,
            gates,
        })
    }

    pub fn constant(pairs: usize, height: usize, width: usize, open: bool) -> Self {
        GateAssignment {
            height,
            width,
            gates: vec![vec![open as u8; height * width]; pairs],
        }
    }

    pub fn pair(&self, idx: usize) -> &[u8] {
        &self.gates[idx]
    }

    pub fn num_pairs(&self) -> usize {
        self.gates.len()
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_pairs_exclude_self() {
        assert_eq!(
            ordered_pairs(3),
            vec![(1, 0), (2, 0), (0, 1), (2, 1), (0, 2), (1, 2)]
        );
        assert!(ordered_pairs(1).is_empty());
    }

    #[test]
    fn default_params_follow_conventions() {
        let p = AgCrfParams::zeros(&[2, 3], 3, DEFAULT_UNARY_WEIGHT).unwrap();
        assert_eq!(p.pairs().len(), 2);
        let pk = &p.pairs()[p.pair_index(0, 1).unwrap()];
        assert_eq!(pk.pairwise.shape(), (3, 2, 3, 3));
        assert_eq!(pk.linear_emitter.shape(), (1, 2, 3, 3));
        assert_eq!(pk.linear_receiver.shape(), (1, 3, 3, 3));
        assert_eq!(pk.pairwise.stride(), 1);
        assert_eq!(pk.pairwise.padding(), 1);
        assert_eq!(p.fixed_unary(0).unwrap(), 0.1);
        assert_eq!(p.variant, Variant::Flag);
        assert_eq!(p.sign, GateSign::Plus);
        assert!(AgCrfParams::zeros(&[2], 3, 0.0).is_err());
        assert!(AgCrfParams::zeros(&[2], 4, 0.1).is_ok(), "single scale has no kernels");
        assert!(AgCrfParams::zeros(&[2, 2], 4, 0.1).is_err());
    }

    #[test]
    fn scale_set_requires_alignment() {
        assert!(ScaleSet::new(vec![Tensor::zeros(1, 4, 4), Tensor::zeros(2, 4, 5)]).is_err());
        assert!(ScaleSet::new(vec![]).is_err());
        let s = ScaleSet::new(vec![Tensor::zeros(1, 4, 4), Tensor::zeros(2, 4, 4)]).unwrap();
        assert_eq!(s.channels(), vec![1, 2]);
    }

    #[test]
    fn gate_assignment_is_binary() {
        assert!(GateAssignment::new(1, 2, vec![vec![0, 2]]).is_err());
        assert!(GateAssignment::new(1, 2, vec![vec![0]]).is_err());
        assert!(GateAssignment::new(1, 2, vec![vec![0, 1]]).is_ok());
    }

    #[test]
    fn parse_names() {
        assert_eq!("plag".parse::<Variant>().unwrap(), Variant::Plag);
        assert!("nope".parse::<Variant>().is_err());
        assert_eq!("minus".parse::<GateSign>().unwrap().factor(), -1.0);
    }
}
