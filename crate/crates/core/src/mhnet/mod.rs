//! The multi-scale hierarchical contour network.
//!
//! A small convolutional front-end is tapped at `L` layers. Every tap is split
//! into an upsampled (D), same-size (C) and pooled (M) branch, the three are
//! aligned and fused by a first-level AG-CRF, and the `L` fused maps are fused
//! again by a second-level AG-CRF. Each fusion output carries a sigmoid head;
//! the final prediction is the mean of the `L + 1` heads.

pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agcrf::{
    ordered_pairs, unrolled_inference, GateSign, PairVars, UnaryVar, UnrolledConfig,
    UnrolledKernels, Variant,
};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::{ConvKernel, ParamId, Params, Tape, Tensor, TraceEntry, Var};

/// Rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// Taps concatenated into a single head, no hierarchy.
    Baseline,
    /// Hierarchy with concatenation and convolution in place of every AG-CRF.
    NoAgcrf,
    /// AG-CRFs with every gate held open.
    PlainCrf,
    /// FLAG model trained on the fused output only.
    NoDeepSup,
    Plag,
    Flag,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Baseline,
        Ablation::NoAgcrf,
        Ablation::PlainCrf,
        Ablation::NoDeepSup,
        Ablation::Plag,
        Ablation::Flag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::NoAgcrf => "no_agcrf",
            Ablation::PlainCrf => "plain_crf",
            Ablation::NoDeepSup => "no_deep_sup",
            Ablation::Plag => "plag",
            Ablation::Flag => "flag",
        }
    }

    /// AG-CRF variant used by the fusion blocks, if any.
    pub fn crf_variant(self) -> Option<Variant> {
        match self {
            Ablation::Baseline | Ablation::NoAgcrf => None,
            Ablation::PlainCrf => Some(Variant::PlainCrf),
            Ablation::Plag => Some(Variant::Plag),
            Ablation::Flag | Ablation::NoDeepSup => Some(Variant::Flag),
        }
    }

    pub fn deep_supervision(self) -> bool {
        self != Ablation::NoDeepSup
    }

    pub fn hierarchical(self) -> bool {
        self != Ablation::Baseline
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown model configuration {s:?} (expected one of baseline, no_agcrf, plain_crf, no_deep_sup, plag, flag)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryMode {
    Fixed,
    /// Per-scale 1x1 convolution initialised to `a * I`.
    Learned,
}

impl FromStr for UnaryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(UnaryMode::Fixed),
            "learned" => Ok(UnaryMode::Learned),
            _ => Err(Error::invalid(format!("unknown unary mode {s:?}"))),
        }
    }
}

impl fmt::Display for UnaryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnaryMode::Fixed => "fixed",
            UnaryMode::Learned => "learned",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontEndConfig {
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
    /// 1-based indices of the tapped layers, increasing.
    pub taps: Vec<usize>,
}

impl Default for FrontEndConfig {
    fn default() -> Self {
        let layer = |stride| LayerSpec {
            channels: 8,
            kernel: 3,
            stride,
        };
        FrontEndConfig {
            in_channels: 1,
            layers: vec![layer(1), layer(2), layer(2), layer(2)],
            taps: vec![2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyConfig {
    /// Output channels of the D and C branches.
    pub branch_channels: usize,
    /// Output channels of every fusion block.
    pub fused_channels: usize,
    /// D upsampling factor; the deconvolution uses kernel `2u`, padding `u/2`.
    pub upsample: usize,
    pub c_kernel: usize,
    pub pool: usize,
    pub crf_kernel: usize,
    pub iterations: usize,
    pub sign: GateSign,
    pub unary: UnaryMode,
    pub unary_weight: f64,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            branch_channels: 8,
            fused_channels: 8,
            upsample: 2,
            c_kernel: 3,
            pool: 2,
            crf_kernel: 3,
            iterations: 1,
            sign: GateSign::Plus,
            unary: UnaryMode::Learned,
            unary_weight: crate::agcrf::DEFAULT_UNARY_WEIGHT,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub ablation: Ablation,
    pub front: FrontEndConfig,
    pub hierarchy: HierarchyConfig,
    /// Seed for parameter initialisation.
    pub seed: u64,
}

fn join(xs: impl IntoIterator<Item = usize>) -> String {
    xs.into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn split(key: &str, s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {p:?}")))
        })
        .collect()
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "model",
        "init_seed",
        "in_channels",
        "front_channels",
        "front_kernels",
        "front_strides",
        "taps",
        "branch_channels",
        "fused_channels",
        "upsample",
        "c_kernel",
        "pool",
        "crf_kernel",
        "crf_iterations",
        "sign",
        "unary",
        "unary_weight",
    ];

    pub fn new(ablation: Ablation) -> Self {
        ModelConfig {
            ablation,
            front: FrontEndConfig::default(),
            hierarchy: HierarchyConfig::default(),
            seed: 0,
        }
    }

    /// Reads the model keys of `kv`; other keys are ignored.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut c = ModelConfig::new(kv.get_or("model", Ablation::Flag)?);
        c.seed = kv.get_or("init_seed", c.seed)?;
        let f = &mut c.front;
        f.in_channels = kv.get_or("in_channels", f.in_channels)?;
        let n = f.layers.len();
        let chans = match kv.get_str("front_channels") {
            Some(s) => split("front_channels", s)?,
            None => f.layers.iter().map(|l| l.channels).collect(),
        };
        let kernels = match kv.get_str("front_kernels") {
            Some(s) => split("front_kernels", s)?,
            None if chans.len() == n => f.layers.iter().map(|l| l.kernel).collect(),
            None => vec![3; chans.len()],
        };
        let strides = match kv.get_str("front_strides") {
            Some(s) => split("front_strides", s)?,
            None if chans.len() == n => f.layers.iter().map(|l| l.stride).collect(),
            None => return Err(Error::Config("front_strides is required when front_channels changes the depth".into())),
        };
        if kernels.len() != chans.len() || strides.len() != chans.len() {
            return Err(Error::Config(
                "front_channels, front_kernels and front_strides differ in length".into(),
            ));
        }
        f.layers = chans
            .iter()
            .zip(&kernels)
            .zip(&strides)
            .map(|((&channels, &kernel), &stride)| LayerSpec {
                channels,
                kernel,
                stride,
            })
            .collect();
        if let Some(s) = kv.get_str("taps") {
            f.taps = split("taps", s)?;
        }
        let h = &mut c.hierarchy;
        h.branch_channels = kv.get_or("branch_channels", h.branch_channels)?;
        h.fused_channels = kv.get_or("fused_channels", h.fused_channels)?;
        h.upsample = kv.get_or("upsample", h.upsample)?;
        h.c_kernel = kv.get_or("c_kernel", h.c_kernel)?;
        h.pool = kv.get_or("pool", h.pool)?;
        h.crf_kernel = kv.get_or("crf_kernel", h.crf_kernel)?;
        h.iterations = kv.get_or("crf_iterations", h.iterations)?;
        h.sign = kv.get_or("sign", h.sign)?;
        h.unary = kv.get_or("unary", h.unary)?;
        h.unary_weight = kv.get_or("unary_weight", h.unary_weight)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        let f = &self.front;
        let h = &self.hierarchy;
        kv.insert("model", self.ablation);
        kv.insert("init_seed", self.seed);
        kv.insert("in_channels", f.in_channels);
        kv.insert("front_channels", join(f.layers.iter().map(|l| l.channels)));
        kv.insert("front_kernels", join(f.layers.iter().map(|l| l.kernel)));
        kv.insert("front_strides", join(f.layers.iter().map(|l| l.stride)));
        kv.insert("taps", join(f.taps.iter().copied()));
        kv.insert("branch_channels", h.branch_channels);
        kv.insert("fused_channels", h.fused_channels);
        kv.insert("upsample", h.upsample);
        kv.insert("c_kernel", h.c_kernel);
        kv.insert("pool", h.pool);
        kv.insert("crf_kernel", h.crf_kernel);
        kv.insert("crf_iterations", h.iterations);
        kv.insert(
            "sign",
            match h.sign {
                GateSign::Plus => "plus",
                GateSign::Minus => "minus",
            },
        );
        kv.insert("unary", h.unary);
        // shortest representation that parses back to the same bits
        kv.insert("unary_weight", format!("{:?}", h.unary_weight));
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.front;
        let h = &self.hierarchy;
        let bad = |m: String| Err(Error::Config(m));
        if f.in_channels == 0 || f.layers.is_empty() {
            return bad("front-end needs input channels and at least one layer".into());
        }
        for (i, l) in f.layers.iter().enumerate() {
            if l.channels == 0 || l.stride == 0 || l.kernel % 2 == 0 {
                return bad(format!(
                    "front layer {}: channels and stride must be positive, kernel odd",
                    i + 1
                ));
            }
        }
        if f.taps.len() < 2 {
            return bad(format!("need at least 2 taps, got {}", f.taps.len()));
        }
        if f.taps.windows(2).any(|w| w[0] >= w[1])
            || f.taps[0] == 0
            || *f.taps.last().unwrap() > f.layers.len()
        {
            return bad(format!(
                "taps {:?} must be increasing layer indices in 1..={}",
                f.taps,
                f.layers.len()
            ));
        }
        if h.upsample == 0 || (h.upsample > 1 && h.upsample % 2 == 1) {
            return bad(format!("upsample factor {} must be 1 or even", h.upsample));
        }
        if h.pool == 0 || h.branch_channels == 0 || h.fused_channels == 0 {
            return bad("pool and channel counts must be positive".into());
        }
        if h.c_kernel % 2 == 0 || h.crf_kernel % 2 == 0 {
            return bad("branch and AG-CRF kernels must be odd".into());
        }
        if h.iterations == 0 {
            return bad("crf_iterations must be >= 1".into());
        }
        if !h.unary_weight.is_finite() {
            return bad("unary_weight must be finite".into());
        }
        if self.ablation.hierarchical() {
            // every resampling factor must be an integer
            let strides = self.tap_strides();
            let s0 = strides[0];
            if let Some(s) = strides.iter().find(|&&s| s % h.upsample != 0 || s % s0 != 0) {
                return bad(format!(
                    "tap stride {s} is not a multiple of the upsample factor {} and the first tap stride {s0}",
                    h.upsample
                ));
            }
        }
        Ok(())
    }

    /// Cumulative stride of each tapped layer.
    pub fn tap_strides(&self) -> Vec<usize> {
        let mut acc = 1;
        let cum: Vec<usize> = self
            .front
            .layers
            .iter()
            .map(|l| {
                acc *= l.stride;
                acc
            })
            .collect();
        self.front.taps.iter().map(|&t| cum[t - 1]).collect()
    }

    fn tap_channels(&self) -> Vec<usize> {
        self.front
            .taps
            .iter()
            .map(|&t| self.front.layers[t - 1].channels)
            .collect()
    }

    /// Number of prediction heads the model produces.
    pub fn num_heads(&self) -> usize {
        if self.ablation.hierarchical() {
            self.front.taps.len() + 1
        } else {
            1
        }
    }
}

/// Parameters of an AG-CRF block.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfIds {
    pub pairs: Vec<(usize, usize, [ParamId; 3])>,
    pub unary: Vec<Option<ParamId>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvIds {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
struct Level1Ids {
    d: ConvIds,
    c: ConvIds,
    align_c: Option<ParamId>,
    align_m: Option<ParamId>,
    crf: Option<CrfIds>,
    mix: ConvIds,
    head: ConvIds,
    up: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
struct Level2Ids {
    align: Vec<Option<ParamId>>,
    crf: Option<CrfIds>,
    mix: ConvIds,
    head: ConvIds,
    up: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
enum Layout {
    Baseline {
        align: Vec<Option<ParamId>>,
        head: ConvIds,
    },
    Hierarchy {
        level1: Vec<Level1Ids>,
        level2: Level2Ids,
    },
}

/// Bilinear upsampling weights for a deconvolution of factor `f` (kernel `2f`).
pub fn bilinear_weights(f: usize) -> Vec<f64> {
    let k = 2 * f;
    let center = f as f64 - 0.5;
    let w1: Vec<f64> = (0..k)
        .map(|i| 1.0 - (i as f64 - center).abs() / f as f64)
        .collect();
    let mut out = Vec::with_capacity(k * k);
    for &a in &w1 {
        for &b in &w1 {
            out.push(a * b);
        }
    }
    out
}

/// Channel-diagonal bilinear deconvolution kernel upsampling by `f`.
pub fn bilinear_kernel(channels: usize, f: usize) -> Result<ConvKernel> {
    if f < 2 || f % 2 == 1 {
        return Err(Error::invalid(format!(
            "alignment factor {f} must be even and >= 2"
        )));
    }
    let k = 2 * f;
    let plane = bilinear_weights(f);
    let mut values = vec![0.0; channels * channels * k * k];
    for c in 0..channels {
        let at = (c * channels + c) * k * k;
        values[at..at + k * k].copy_from_slice(&plane);
    }
    ConvKernel::new((channels, channels, k, k), f, f / 2, values)
}

struct Builder<'a> {
    params: Params,
    rng: ChaCha8Rng,
    cfg: &'a ModelConfig,
}

impl Builder<'_> {
    fn uniform(&mut self, n: usize, bound: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()
    }

    /// Convolution with fan-in uniform init; `gain` 6 suits a following ReLU.
    fn conv(
        &mut self,
        name: &str,
        (out_ch, in_ch, k): (usize, usize, usize),
        stride: usize,
        gain: f64,
        bias: bool,
    ) -> Result<ConvIds> {
        let bound = (gain / (in_ch * k * k) as f64).sqrt();
        let values = self.uniform(out_ch * in_ch * k * k, bound);
        let kernel = ConvKernel::new((out_ch, in_ch, k, k), stride, (k - 1) / 2, values)?;
        let w = self.params.add_kernel(format!("{name}.w"), &kernel);
        let b = bias.then(|| self.params.add_bias(format!("{name}.b"), vec![0.0; out_ch]));
        Ok(ConvIds { w, b })
    }

    /// Upsampling deconvolution `in_ch -> out_ch` by factor `u`.
    fn up_deconv(&mut self, name: &str, in_ch: usize, out_ch: usize, u: usize) -> Result<ConvIds> {
        let k = 2 * u;
        let bound = (6.0 / (in_ch * 4) as f64).sqrt();
        let values = self.uniform(in_ch * out_ch * k * k, bound);
        let kernel = ConvKernel::new((in_ch, out_ch, k, k), u, u / 2, values)?;
        let w = self.params.add_kernel(format!("{name}.w"), &kernel);
        let b = Some(self.params.add_bias(format!("{name}.b"), vec![0.0; out_ch]));
        Ok(ConvIds { w, b })
    }

    fn align(&mut self, name: &str, channels: usize, f: usize) -> Result<Option<ParamId>> {
        if f == 1 {
            return Ok(None);
        }
        let k = bilinear_kernel(channels, f)?;
        Ok(Some(self.params.add_kernel(name, &k)))
    }

    fn crf(&mut self, name: &str, channels: &[usize]) -> Result<CrfIds> {
        let h = &self.cfg.hierarchy;
        let k = h.crf_kernel;
        let mut pairs = Vec::new();
        for (e, r) in ordered_pairs(channels.len()) {
            let (ce, cr) = (channels[e], channels[r]);
            let pre = format!("{name}.p{e}to{r}");
            let l = ConvKernel::zeros((cr, ce, k, k), 1, (k - 1) / 2)?;
            let le = ConvKernel::zeros((1, ce, k, k), 1, (k - 1) / 2)?;
            let lr = ConvKernel::zeros((1, cr, k, k), 1, (k - 1) / 2)?;
            let ids = [
                self.params.add_kernel(format!("{pre}.pairwise"), &l),
                self.params.add_kernel(format!("{pre}.linear_emitter"), &le),
                self.params.add_kernel(format!("{pre}.linear_receiver"), &lr),
            ];
            pairs.push((e, r, ids));
        }
        let unary = channels
            .iter()
            .enumerate()
            .map(|(s, &c)| match h.unary {
                UnaryMode::Fixed => Ok(None),
                UnaryMode::Learned => {
                    let mut v = vec![0.0; c * c];
                    for i in 0..c {
                        v[i * c + i] = h.unary_weight;
                    }
                    let k = ConvKernel::pointwise(c, c, v)?;
                    Ok(Some(self.params.add_kernel(format!("{name}.unary{s}"), &k)))
                }
            })
            .collect::<Result<_>>()?;
        Ok(CrfIds { pairs, unary })
    }
}

/// A model: configuration, parameters and their wiring.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Params,
    front: Vec<ConvIds>,
    layout: Layout,
}

/// Head outputs of one forward pass, still on the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOut {
    pub heads: Vec<Var>,
    pub fused: Var,
}

/// Per-head contour maps and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub heads: Vec<Tensor>,
    pub fused: Tensor,
}

impl Model {
    /// Builds and initialises a model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: Params::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            cfg: &config,
        };
        let mut in_ch = config.front.in_channels;
        let mut front = Vec::new();
        for (i, l) in config.front.layers.iter().enumerate() {
            front.push(b.conv(
                &format!("front{}", i + 1),
                (l.channels, in_ch, l.kernel),
                l.stride,
                6.0,
                true,
            )?);
            in_ch = l.channels;
        }
        let strides = config.tap_strides();
        let tap_ch = config.tap_channels();
        let h = config.hierarchy.clone();
        let layout = if !config.ablation.hierarchical() {
            let align = strides
                .iter()
                .zip(&tap_ch)
                .enumerate()
                .map(|(l, (&s, &c))| b.align(&format!("base.align{l}"), c, s))
                .collect::<Result<Vec<_>>>()?;
            let total: usize = tap_ch.iter().sum();
            let head = b.conv("base.head", (1, total, 1), 1, 1.0, true)?;
            Layout::Baseline { align, head }
        } else {
            let crf_on = config.ablation.crf_variant().is_some();
            let u = h.upsample;
            let mut level1 = Vec::new();
            for (l, (&s, &c)) in strides.iter().zip(&tap_ch).enumerate() {
                let n = format!("l1.{l}");
                let d = if u == 1 {
                    b.conv(&format!("{n}.d"), (h.branch_channels, c, 3), 1, 6.0, true)?
                } else {
                    b.up_deconv(&format!("{n}.d"), c, h.branch_channels, u)?
                };
                let cc = b.conv(&format!("{n}.c"), (h.branch_channels, c, h.c_kernel), 1, 6.0, true)?;
                let align_c = b.align(&format!("{n}.align_c"), h.branch_channels, u)?;
                let align_m = b.align(&format!("{n}.align_m"), c, u * h.pool)?;
                let chans = [h.branch_channels, h.branch_channels, c];
                let crf = if crf_on {
                    Some(b.crf(&format!("{n}.crf"), &chans)?)
                } else {
                    None
                };
                let total: usize = chans.iter().sum();
                let mix = b.conv(&format!("{n}.mix"), (h.fused_channels, total, 1), 1, 6.0, true)?;
                let head = b.conv(&format!("{n}.head"), (1, h.fused_channels, 1), 1, 1.0, true)?;
                let up = b.align(&format!("{n}.up"), 1, s / u)?;
                level1.push(Level1Ids {
                    d,
                    c: cc,
                    align_c,
                    align_m,
                    crf,
                    mix,
                    head,
                    up,
                });
            }
            let s0 = strides[0];
            let align = strides
                .iter()
                .enumerate()
                .map(|(l, &s)| b.align(&format!("l2.align{l}"), h.fused_channels, s / s0))
                .collect::<Result<Vec<_>>>()?;
            let chans = vec![h.fused_channels; strides.len()];
            let crf = if crf_on {
                Some(b.crf("l2.crf", &chans)?)
            } else {
                None
            };
            let mix = b.conv(
                "l2.mix",
                (h.fused_channels, h.fused_channels * strides.len(), 1),
                1,
                6.0,
                true,
            )?;
            let head = b.conv("l2.head", (1, h.fused_channels, 1), 1, 1.0, true)?;
            let up = b.align("l2.up", 1, s0 / u)?;
            Layout::Hierarchy {
                level1,
                level2: Level2Ids {
                    align,
                    crf,
                    mix,
                    head,
                    up,
                },
            }
        };
        Ok(Model {
            params: b.params,
            config,
            front,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn num_heads(&self) -> usize {
        self.config.num_heads()
    }

    /// AG-CRF blocks in forward order (level 1 per tap, then level 2).
    pub fn crf_blocks(&self) -> Vec<&CrfIds> {
        match &self.layout {
            Layout::Baseline { .. } => Vec::new(),
            Layout::Hierarchy { level1, level2 } => level1
                .iter()
                .filter_map(|l| l.crf.as_ref())
                .chain(level2.crf.as_ref())
                .collect(),
        }
    }

    fn crf_config(&self) -> Option<UnrolledConfig> {
        let h = &self.config.hierarchy;
        self.config.ablation.crf_variant().map(|variant| UnrolledConfig {
            iterations: h.iterations,
            variant,
            sign: h.sign,
        })
    }

    fn conv(&self, tape: &mut Tape, x: Var, ids: ConvIds) -> Result<Var> {
        let w = tape.param(&self.params, ids.w);
        let b = ids.b.map(|b| tape.param(&self.params, b));
        tape.conv2d(x, w, b)
    }

    fn deconv(&self, tape: &mut Tape, x: Var, ids: ConvIds) -> Result<Var> {
        let w = tape.param(&self.params, ids.w);
        let b = ids.b.map(|b| tape.param(&self.params, b));
        tape.deconv2d(x, w, b)
    }

    fn align(&self, tape: &mut Tape, x: Var, id: Option<ParamId>) -> Result<Var> {
        match id {
            None => Ok(x),
            Some(id) => {
                let k = tape.param(&self.params, id);
                tape.deconv2d(x, k, None)
            }
        }
    }

    fn crf_kernels(&self, tape: &mut Tape, ids: &CrfIds) -> UnrolledKernels {
        let pairs = ids
            .pairs
            .iter()
            .map(|&(e, r, [l, le, lr])| PairVars {
                emitter: e,
                receiver: r,
                pairwise: tape.param(&self.params, l),
                linear_emitter: tape.param(&self.params, le),
                linear_receiver: tape.param(&self.params, lr),
            })
            .collect();
        let a = self.config.hierarchy.unary_weight;
        let unary = ids
            .unary
            .iter()
            .map(|u| match u {
                None => UnaryVar::Fixed(a),
                Some(id) => UnaryVar::Conv(tape.param(&self.params, *id)),
            })
            .collect();
        UnrolledKernels { pairs, unary }
    }

    fn head(&self, tape: &mut Tape, x: Var, head: ConvIds, up: Option<ParamId>) -> Result<Var> {
        tape.scoped("head", |tp| {
            let logits = self.conv(tp, x, head)?;
            let logits = self.align(tp, logits, up)?;
            tp.sigmoid(logits)
        })
    }

    /// Front-end activations at the tap points.
    fn front_end(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>> {
        tape.scoped("front", |tp| {
            let mut x = image;
            let mut taps = Vec::new();
            for (i, ids) in self.front.iter().enumerate() {
                let y = self.conv(tp, x, *ids)?;
                x = tp.relu(y)?;
                if self.config.front.taps.contains(&(i + 1)) {
                    taps.push(x);
                }
            }
            Ok(taps)
        })
    }

    /// Records the full forward pass for an image already on `tape`.
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<ForwardOut> {
        let (c, h, w) = tape
            .shape(image)
            .ok_or_else(|| Error::invalid("forward input must be a feature map"))?;
        if c != self.config.front.in_channels {
            return Err(Error::shape(
                "forward_amhnet",
                format!(
                    "image has {c} channels, model expects {}",
                    self.config.front.in_channels
                ),
            ));
        }
        let taps = self.front_end(tape, image)?;
        let heads = match &self.layout {
            Layout::Baseline { align, head } => tape.scoped("baseline", |tp| -> Result<_> {
                let aligned = taps
                    .iter()
                    .zip(align)
                    .map(|(&t, &a)| self.align(tp, t, a))
                    .collect::<Result<Vec<_>>>()?;
                let cat = tp.concat(&aligned)?;
                Ok(vec![self.head(tp, cat, *head, None)?])
            })?,
            Layout::Hierarchy { level1, level2 } => {
                let cfg = self.crf_config();
                let mut heads = Vec::new();
                let mut fused = Vec::new();
                for (l, (ids, &tap)) in level1.iter().zip(&taps).enumerate() {
                    let (out, hd) = tape.scoped(format!("level1/layer{l}"), |tp| -> Result<_> {
                        let branches = tp.scoped("decompose", |tp| self.decompose(tp, tap, ids))?;
                        let kernels = ids.crf.as_ref().map(|c| self.crf_kernels(tp, c));
                        let mix_w = tp.param(&self.params, ids.mix.w);
                        let mix_b = ids.mix.b.map(|b| tp.param(&self.params, b));
                        let out = fuse(tp, &branches, kernels.as_ref().zip(cfg.as_ref()), mix_w, mix_b)?;
                        let hd = self.head(tp, out, ids.head, ids.up)?;
                        Ok((out, hd))
                    })?;
                    fused.push(out);
                    heads.push(hd);
                }
                let hd = tape.scoped("level2", |tp| -> Result<_> {
                    let aligned = fused
                        .iter()
                        .zip(&level2.align)
                        .map(|(&x, &a)| self.align(tp, x, a))
                        .collect::<Result<Vec<_>>>()?;
                    let kernels = level2.crf.as_ref().map(|c| self.crf_kernels(tp, c));
                    let mix_w = tp.param(&self.params, level2.mix.w);
                    let mix_b = level2.mix.b.map(|b| tp.param(&self.params, b));
                    let out = fuse(tp, &aligned, kernels.as_ref().zip(cfg.as_ref()), mix_w, mix_b)?;
                    self.head(tp, out, level2.head, level2.up)
                })?;
                heads.push(hd);
                heads
            }
        };
        for &hd in &heads {
            let s = tape.shape(hd).expect("head is a map");
            if s != (1, h, w) {
                return Err(Error::shape(
                    "forward_amhnet",
                    format!("head of size {}x{} for a {h}x{w} input", s.1, s.2),
                ));
            }
        }
        let fused = tape.scoped("fuse", |tp| tp.mean(&heads))?;
        Ok(ForwardOut { heads, fused })
    }

    fn decompose(&self, tape: &mut Tape, tap: Var, ids: &Level1Ids) -> Result<[Var; 3]> {
        let (_, h, w) = tape.shape(tap).expect("tap is a map");
        let p = self.config.hierarchy.pool;
        if h < p || w < p || h % p != 0 || w % p != 0 {
            return Err(Error::shape(
                "three_way_decompose",
                format!("{h}x{w} tap cannot be pooled by {p} and realigned"),
            ));
        }
        let d = if self.config.hierarchy.upsample == 1 {
            self.conv(tape, tap, ids.d)?
        } else {
            self.deconv(tape, tap, ids.d)?
        };
        let d = tape.relu(d)?;
        let c = self.conv(tape, tap, ids.c)?;
        let c = tape.relu(c)?;
        let c = self.align(tape, c, ids.align_c)?;
        let m = tape.maxpool(tap, p, p)?;
        let m = self.align(tape, m, ids.align_m)?;
        Ok([d, c, m])
    }

    /// Runs the network on an image with values in `[0, 1]`.
    pub fn predict(&self, image: &Tensor) -> Result<PredictionSet> {
        let mut tape = Tape::new();
        let x = tape.input(&preprocess(image));
        let out = self.forward(&mut tape, x)?;
        Ok(PredictionSet {
            heads: out.heads.iter().map(|&v| tape.value(v)).collect(),
            fused: tape.value(out.fused),
        })
    }
}

/// Centres `[0, 1]` intensities on zero.
pub fn preprocess(image: &Tensor) -> Tensor {
    image.map(|v| v - 0.5)
}

/// AG-CRF fusion of aligned maps (or plain concatenation when `crf` is
/// `None`) followed by a 1x1 combiner and ReLU.
fn fuse(
    tape: &mut Tape,
    maps: &[Var],
    crf: Option<(&UnrolledKernels, &UnrolledConfig)>,
    mix_w: Var,
    mix_b: Option<Var>,
) -> Result<Var> {
    let refined = match crf {
        Some((k, cfg)) => tape.scoped("agcrf", |tp| unrolled_inference(tp, maps, k, cfg, None))?.hbar,
        None => maps.to_vec(),
    };
    tape.scoped("combine", |tp| {
        let cat = tp.concat(&refined)?;
        let y = tp.conv2d(cat, mix_w, mix_b)?;
        tp.relu(y)
    })
}

/// Treats the three aligned branches as virtual scales of one AG-CRF and
/// combines the refined maps with a 1x1 convolution.
pub fn level1_fuse(
    tape: &mut Tape,
    branches: [Var; 3],
    crf: Option<(&UnrolledKernels, &UnrolledConfig)>,
    mix_w: Var,
    mix_b: Option<Var>,
) -> Result<Var> {
    check_aligned(tape, &branches, "level1_fuse")?;
    fuse(tape, &branches, crf, mix_w, mix_b)
}

/// Fuses the per-layer outputs. A single layer passes through unchanged.
pub fn level2_fuse(
    tape: &mut Tape,
    refined: &[Var],
    crf: Option<(&UnrolledKernels, &UnrolledConfig)>,
    mix_w: Var,
    mix_b: Option<Var>,
) -> Result<Var> {
    match refined {
        [] => Err(Error::invalid("level2_fuse needs at least one layer")),
        [only] => Ok(*only),
        _ => {
            check_aligned(tape, refined, "level2_fuse")?;
            fuse(tape, refined, crf, mix_w, mix_b)
        }
    }
}

fn check_aligned(tape: &Tape, maps: &[Var], op: &'static str) -> Result<()> {
    let sizes: Vec<_> = maps
        .iter()
        .map(|&v| tape.shape(v).map(|(_, h, w)| (h, w)))
        .collect();
    if sizes.iter().any(|s| s.is_none() || *s != sizes[0]) {
        return Err(Error::shape(op, format!("maps are not aligned: {sizes:?}")));
    }
    Ok(())
}

/// Forward pass of `model` on `image`, recorded on `tape`.
pub fn forward_amhnet(image: &Tensor, model: &Model, tape: &mut Tape) -> Result<ForwardOut> {
    let x = tape.input(&preprocess(image));
    model.forward(tape, x)
}

/// The default model wired for one ablation row.
pub fn build_ablation(name: &str) -> Result<Model> {
    Model::new(ModelConfig::new(name.parse()?))
}

/// Trace entries outside every `attention` scope.
pub fn trace_without_attention(trace: &[TraceEntry]) -> Vec<TraceEntry> {
    trace
        .iter()
        .filter(|e| !e.scope.split('/').any(|s| s == "attention"))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(ablation: Ablation) -> ModelConfig {
        let mut c = ModelConfig::new(ablation);
        for l in &mut c.front.layers {
            l.channels = 3;
        }
        c.hierarchy.branch_channels = 3;
        c.hierarchy.fused_channels = 3;
        c.seed = 5;
        c
    }

    fn image(h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        Tensor::random(&mut rng, 1, h, w, 0.0, 1.0)
    }

    fn randomize_crf(m: &mut Model, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<ParamId> = m
            .crf_blocks()
            .iter()
            .flat_map(|c| c.pairs.iter().flat_map(|p| p.2))
            .collect();
        for id in ids {
            for v in m.params_mut().values_mut(id) {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn bilinear_deconv_upsamples_constants() {
        for f in [2, 4, 8] {
            let k = bilinear_kernel(2, f).unwrap();
            let x = Tensor::filled(2, 4, 4, 1.0);
            let y = crate::tensor::deconv2d(&x, &k).unwrap();
            assert_eq!(y.shape(), (2, 4 * f, 4 * f));
            // interior pixels see the full partition of unity
            for yy in f..3 * f {
                for xx in f..3 * f {
                    assert!((y.get(1, yy, xx) - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(bilinear_kernel(1, 3).is_err());
    }

    #[test]
    fn decompose_sizes_for_8x8_tap() {
        let m = Model::new(small(Ablation::Flag)).unwrap();
        let Layout::Hierarchy { level1, .. } = &m.layout else { panic!() };
        let mut tape = Tape::new();
        let tap = tape.input(&Tensor::filled(3, 8, 8, 0.3));
        let [d, c, mm] = m.decompose(&mut tape, tap, &level1[0]).unwrap();
        for v in [d, c, mm] {
            assert_eq!(tape.shape(v).unwrap().1, 16);
        }
        let trace = tape.trace();
        let sizes: Vec<&str> = trace.iter().map(|t| t.dims.as_str()).collect();
        assert!(sizes.contains(&"3x16x16")); // D before ReLU
        assert!(sizes.contains(&"3x8x8")); // C before alignment
        assert!(sizes.contains(&"3x4x4")); // M before alignment
        let tiny = tape.input(&Tensor::zeros(3, 1, 1));
        assert!(matches!(
            m.decompose(&mut tape, tiny, &level1[0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_branches() {
        let m = Model::new(small(Ablation::Flag)).unwrap();
        let Layout::Hierarchy { level1, .. } = &m.layout else { panic!() };
        let mut tape = Tape::new();
        let tap = tape.input(&Tensor::zeros(3, 8, 8));
        for v in m.decompose(&mut tape, tap, &level1[1]).unwrap() {
            assert_eq!(tape.value(v).max_abs(), 0.0);
        }
    }

    #[test]
    fn head_counts_and_ranges() {
        for a in Ablation::ALL {
            let m = Model::new(small(a)).unwrap();
            let p = m.predict(&image(16, 16)).unwrap();
            let want = if a == Ablation::Baseline { 1 } else { 4 };
            assert_eq!(p.heads.len(), want, "{a}");
            assert_eq!(m.num_heads(), want);
            let mut mean = Tensor::zeros(1, 16, 16);
            for h in &p.heads {
                assert_eq!(h.shape(), (1, 16, 16));
                assert!(h.data().iter().all(|&v| v > 0.0 && v < 1.0));
                for (m, v) in mean.data_mut().iter_mut().zip(h.data()) {
                    *m += v;
                }
            }
            let mean = mean.scale(1.0 / p.heads.len() as f64);
            assert!(mean.max_abs_diff(&p.fused).unwrap() < 1e-15);
        }
    }

    #[test]
    fn zero_crf_kernels_match_concatenation() {
        // untrained AG-CRF kernels send zero messages
        let flag = Model::new(small(Ablation::Flag)).unwrap();
        let plain = Model::new(small(Ablation::NoAgcrf)).unwrap();
        let x = image(16, 16);
        assert_eq!(flag.predict(&x).unwrap(), plain.predict(&x).unwrap());
    }

    #[test]
    fn level1_with_zero_kernels_is_conv_combination() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let maps: Vec<Var> = (0..3)
            .map(|_| tape.input(&Tensor::random(&mut rng, 2, 6, 6, -1.0, 1.0)))
            .collect();
        let p = crate::agcrf::AgCrfParams::zeros(&[2, 2, 2], 3, 0.1).unwrap();
        let k = UnrolledKernels::from_params(&mut tape, &p);
        let cfg = UnrolledConfig::from(&p);
        let w = tape.kernel(&ConvKernel::random_same(&mut rng, 2, 6, 1, 0.5).unwrap());
        let with = level1_fuse(&mut tape, [maps[0], maps[1], maps[2]], Some((&k, &cfg)), w, None).unwrap();
        let without = level1_fuse(&mut tape, [maps[0], maps[1], maps[2]], None, w, None).unwrap();
        assert_eq!(tape.value(with), tape.value(without));
        assert_eq!(tape.shape(with).unwrap(), (2, 6, 6));
    }

    #[test]
    fn level2_single_layer_passes_through() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::filled(2, 3, 3, 0.7));
        let w = tape.kernel(&ConvKernel::pointwise(2, 2, vec![1.0; 4]).unwrap());
        assert_eq!(level2_fuse(&mut tape, &[x], None, w, None).unwrap(), x);
        let y = tape.input(&Tensor::zeros(2, 4, 4));
        assert!(level2_fuse(&mut tape, &[x, y], None, w, None).is_err());
    }

    #[test]
    fn plain_crf_differs_from_flag_only_in_attention() {
        let mut flag = Model::new(small(Ablation::Flag)).unwrap();
        let mut plain = Model::new(small(Ablation::PlainCrf)).unwrap();
        randomize_crf(&mut flag, 3);
        randomize_crf(&mut plain, 3);
        assert_eq!(flag.params(), plain.params());
        let x = image(16, 16);
        let mut ta = Tape::new();
        forward_amhnet(&x, &flag, &mut ta).unwrap();
        let mut tb = Tape::new();
        forward_amhnet(&x, &plain, &mut tb).unwrap();
        let a = trace_without_attention(&ta.trace());
        let b = trace_without_attention(&tb.trace());
        assert!(ta.trace().len() > a.len());
        assert_eq!(tb.trace().len(), b.len());
        assert_eq!(a.len(), b.len());
        for (ea, eb) in a.iter().zip(&b) {
            assert_eq!((&ea.scope, ea.op, &ea.dims), (&eb.scope, eb.op, &eb.dims));
        }
        // everything up to the first gating op is bit-identical
        let first_gate = a.iter().position(|e| e.op == "gate").unwrap();
        assert!(first_gate > 0);
        assert_eq!(a[..first_gate], b[..first_gate]);
        assert_ne!(a[first_gate].digest, b[first_gate].digest);
    }

    #[test]
    fn flag_and_plag_share_layout() {
        let f = Model::new(small(Ablation::Flag)).unwrap();
        let p = Model::new(small(Ablation::Plag)).unwrap();
        assert_eq!(f.params(), p.params());
        assert_eq!(f.layout, p.layout);
    }

    #[test]
    fn ablation_names() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
            assert!(build_ablation(a.name()).is_ok());
        }
        assert!(build_ablation("resnet").is_err());
        let m = build_ablation("no_agcrf").unwrap();
        assert!(m.crf_blocks().is_empty());
        assert_eq!(build_ablation("plain_crf").unwrap().crf_blocks().len(), 4);
    }

    #[test]
    fn config_round_trips_through_kv() {
        let mut c = small(Ablation::Plag);
        c.hierarchy.unary_weight = 0.1 + 1e-17;
        c.hierarchy.sign = GateSign::Minus;
        c.hierarchy.iterations = 2;
        let back = ModelConfig::from_kv(&KvMap::parse(&c.to_kv().to_text()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::new(Ablation::Flag);
        c.front.taps = vec![3];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(Ablation::Flag);
        c.front.taps = vec![3, 2];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(Ablation::Flag);
        c.hierarchy.upsample = 3;
        assert!(c.validate().is_err());
        let m = Model::new(ModelConfig::new(Ablation::Flag)).unwrap();
        // 12 is not divisible by the deepest tap stride
        assert!(m.predict(&image(12, 12)).is_err());
        assert!(m.predict(&Tensor::zeros(3, 16, 16)).is_err());
    }
}
