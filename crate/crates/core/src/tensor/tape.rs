//! Reverse-mode differentiation over recorded tensor ops.
//!
//! A [`Tape`] is an append-only list of nodes. Every forward op stores its
//! output value and the handles of its inputs; [`Tape::backward`] walks the
//! list in reverse and accumulates vector-Jacobian products. Leaves are
//! inputs, free-standing kernels, or entries of a [`Params`] store.

use std::collections::HashMap;
use std::fmt;

use super::kernels::{self, Geom};
use super::params::{ParamId, ParamShape, Params};
use super::{conv_out_size, deconv_out_size, pool_out_size, ConvKernel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dims {
    Map(usize, usize, usize),
    Kernel(Geom),
    Vector(usize),
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dims::Map(c, h, w) => write!(f, "{c}x{h}x{w}"),
            Dims::Kernel(g) => write!(
                f,
                "{}x{}x{}x{}/s{}p{}",
                g.out_ch, g.in_ch, g.kh, g.kw, g.stride, g.pad
            ),
            Dims::Vector(n) => write!(f, "[{n}]"),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv { x: Var, k: Var, bias: Option<Var> },
    Deconv { x: Var, k: Var, bias: Option<Var> },
    MaxPool { x: Var, argmax: Vec<usize> },
    Sigmoid { x: Var },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Gate { alpha: Var, x: Var },
    ChannelSum { x: Var },
    Scale { x: Var, s: f64 },
    Concat { xs: Vec<Var> },
    Mean { xs: Vec<Var> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Conv { .. } => "conv2d",
            Op::Deconv { .. } => "deconv2d",
            Op::MaxPool { .. } => "maxpool",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Gate { .. } => "gate",
            Op::ChannelSum { .. } => "channel_sum",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat",
            Op::Mean { .. } => "mean",
        }
    }
}

struct Node {
    dims: Dims,
    value: Vec<f64>,
    op: Op,
    scope: String,
}

/// One recorded op, as reported by [`Tape::trace`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub scope: String,
    pub op: &'static str,
    pub dims: String,
    /// FNV-1a digest of the output's bit pattern.
    pub digest: u64,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {:016x}",
            self.scope, self.op, self.dims, self.digest
        )
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    scope: Vec<String>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    /// Runs `f` with `name` pushed on the scope stack.
    pub fn scoped<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Tape) -> T) -> T {
        self.push_scope(name);
        let out = f(self);
        self.pop_scope();
        out
    }

    fn push(&mut self, dims: Dims, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            dims,
            value,
            op,
            scope: self.scope.join("/"),
        });
        Var(self.nodes.len() - 1)
    }

    fn map_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.node(v)?.dims {
            Dims::Map(c, h, w) => Ok((c, h, w)),
            d => Err(Error::shape(op, format!("expected a feature map, got {d}"))),
        }
    }

    fn kernel_geom(&self, v: Var, op: &'static str) -> Result<Geom> {
        match self.node(v)?.dims {
            Dims::Kernel(g) => Ok(g),
            d => Err(Error::shape(op, format!("expected a kernel, got {d}"))),
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::Tape(format!("variable {} is not on this tape", v.0)))
    }

    /// Records a map that gradients can be read back for.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let (c, h, w) = t.shape();
        self.push(Dims::Map(c, h, w), t.data().to_vec(), Op::Leaf)
    }

    /// Records a free-standing kernel leaf.
    pub fn kernel(&mut self, k: &ConvKernel) -> Var {
        self.push(Dims::Kernel(k.geom()), k.values().to_vec(), Op::Leaf)
    }

    /// Records a bias vector leaf.
    pub fn vector(&mut self, values: &[f64]) -> Var {
        self.push(Dims::Vector(values.len()), values.to_vec(), Op::Leaf)
    }

    /// Brings a stored parameter onto the tape. Repeated requests for the same
    /// id return the same variable so gradients accumulate in one place.
    pub fn param(&mut self, params: &Params, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let e = params.entry(id);
        let dims = match e.shape {
            ParamShape::Kernel {
                out_ch,
                in_ch,
                kh,
                kw,
                stride,
                padding,
            } => Dims::Kernel(Geom {
                out_ch,
                in_ch,
                kh,
                kw,
                stride,
                pad: padding,
            }),
            ParamShape::Bias(n) => Dims::Vector(n),
        };
        let v = self.push(dims, e.values.clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    /// The stored parameter a variable was brought in from, if any.
    pub fn param_id(&self, v: Var) -> Option<ParamId> {
        match self.nodes.get(v.0)?.op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Option<(usize, usize, usize)> {
        match self.nodes.get(v.0)?.dims {
            Dims::Map(c, h, w) => Some((c, h, w)),
            _ => None,
        }
    }

    /// Value of a map variable as a [`Tensor`].
    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        match n.dims {
            Dims::Map(c, h, w) => {
                Tensor::new(c, h, w, n.value.clone()).expect("map node has consistent size")
            }
            d => panic!("value() called on non-map node {d}"),
        }
    }

    fn bias_len(&self, b: Option<Var>, want: usize, op: &'static str) -> Result<()> {
        if let Some(b) = b {
            match self.node(b)?.dims {
                Dims::Vector(n) if n == want => {}
                d => {
                    return Err(Error::shape(
                        op,
                        format!("bias {d} does not match {want} output channels"),
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>) -> Result<Var> {
        let (c, h, w) = self.map_dims(x, "conv2d")?;
        let g = self.kernel_geom(k, "conv2d")?;
        if g.in_ch != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {}", g.in_ch),
            ));
        }
        self.bias_len(bias, g.out_ch, "conv2d")?;
        let (oh, ow) = conv_out_size(g, h, w)?;
        let mut out = vec![0.0; g.out_ch * oh * ow];
        if let Some(b) = bias {
            fill_bias(&mut out, &self.nodes[b.0].value, oh * ow);
        }
        kernels::conv_forward(
            &self.nodes[x.0].value,
            (h, w),
            &self.nodes[k.0].value,
            g,
            &mut out,
            (oh, ow),
        );
        Ok(self.push(Dims::Map(g.out_ch, oh, ow), out, Op::Conv { x, k, bias }))
    }

    pub fn deconv2d(&mut self, x: Var, k: Var, bias: Option<Var>) -> Result<Var> {
        let (c, h, w) = self.map_dims(x, "deconv2d")?;
        let g = self.kernel_geom(k, "deconv2d")?;
        if g.out_ch != c {
            return Err(Error::shape(
                "deconv2d",
                format!(
                    "input has {c} channels, kernel's leading dimension is {}",
                    g.out_ch
                ),
            ));
        }
        self.bias_len(bias, g.in_ch, "deconv2d")?;
        let (oh, ow) = deconv_out_size(g, h, w)?;
        let mut out = vec![0.0; g.in_ch * oh * ow];
        if let Some(b) = bias {
            fill_bias(&mut out, &self.nodes[b.0].value, oh * ow);
        }
        kernels::conv_backward_input(
            &self.nodes[x.0].value,
            (h, w),
            &self.nodes[k.0].value,
            g,
            &mut out,
            (oh, ow),
        );
        Ok(self.push(Dims::Map(g.in_ch, oh, ow), out, Op::Deconv { x, k, bias }))
    }

    pub fn maxpool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (c, h, w) = self.map_dims(x, "maxpool")?;
        let (oh, ow) = pool_out_size(h, w, window, stride)?;
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        kernels::maxpool_forward(
            &self.nodes[x.0].value,
            (c, h, w),
            window,
            stride,
            &mut out,
            &mut argmax,
            (oh, ow),
        );
        Ok(self.push(Dims::Map(c, oh, ow), out, Op::MaxPool { x, argmax }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let dims = Dims::from(self.map_dims(x, "sigmoid")?);
        let out = self.nodes[x.0].value.iter().map(|&v| kernels::sigmoid(v)).collect();
        Ok(self.push(dims, out, Op::Sigmoid { x }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let dims = Dims::from(self.map_dims(x, "relu")?);
        let out = self.nodes[x.0].value.iter().map(|&v| v.max(0.0)).collect();
        Ok(self.push(dims, out, Op::Relu { x }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let dims = Dims::from(self.map_dims(x, "scale")?);
        let out = self.nodes[x.0].value.iter().map(|&v| v * s).collect();
        Ok(self.push(dims, out, Op::Scale { x, s }))
    }

    fn same_maps(&self, a: Var, b: Var, op: &'static str) -> Result<Dims> {
        let da = self.map_dims(a, op)?;
        let db = self.map_dims(b, op)?;
        if da != db {
            return Err(Error::shape(op, format!("{da:?} vs {db:?}")));
        }
        Ok(Dims::from(da))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims = self.same_maps(a, b, "add")?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(dims, out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims = self.same_maps(a, b, "mul")?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(dims, out, Op::Mul { a, b }))
    }

    /// Multiplies every channel of `x` by the 1-channel map `alpha`.
    pub fn gate(&mut self, alpha: Var, x: Var) -> Result<Var> {
        let (ac, ah, aw) = self.map_dims(alpha, "gate")?;
        let (c, h, w) = self.map_dims(x, "gate")?;
        if ac != 1 || ah != h || aw != w {
            return Err(Error::shape(
                "gate",
                format!("gate {ac}x{ah}x{aw} vs map {c}x{h}x{w}"),
            ));
        }
        let n = h * w;
        let a = &self.nodes[alpha.0].value;
        let mut out = self.nodes[x.0].value.clone();
        for ch in 0..c {
            for (o, g) in out[ch * n..(ch + 1) * n].iter_mut().zip(a) {
                *o *= g;
            }
        }
        Ok(self.push(Dims::Map(c, h, w), out, Op::Gate { alpha, x }))
    }

    pub fn channel_sum(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.map_dims(x, "channel_sum")?;
        let n = h * w;
        let src = &self.nodes[x.0].value;
        let mut out = vec![0.0; n];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&src[ch * n..(ch + 1) * n]) {
                *o += v;
            }
        }
        Ok(self.push(Dims::Map(1, h, w), out, Op::ChannelSum { x }))
    }

    /// Channel concatenation of equally sized maps.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero maps"))?;
        let (_, h, w) = self.map_dims(*first, "concat")?;
        let mut total = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (c, xh, xw) = self.map_dims(x, "concat")?;
            if (xh, xw) != (h, w) {
                return Err(Error::shape(
                    "concat",
                    format!("{xh}x{xw} vs {h}x{w}"),
                ));
            }
            total += c;
            out.extend_from_slice(&self.nodes[x.0].value);
        }
        Ok(self.push(
            Dims::Map(total, h, w),
            out,
            Op::Concat { xs: xs.to_vec() },
        ))
    }

    /// Arithmetic mean of equally shaped maps.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("mean of zero maps"))?;
        let dims = self.map_dims(first, "mean")?;
        let mut out = vec![0.0; dims.0 * dims.1 * dims.2];
        for &x in xs {
            let d = self.map_dims(x, "mean")?;
            if d != dims {
                return Err(Error::shape("mean", format!("{d:?} vs {dims:?}")));
            }
            for (o, v) in out.iter_mut().zip(&self.nodes[x.0].value) {
                *o += v;
            }
        }
        let inv = 1.0 / xs.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(Dims::from(dims), out, Op::Mean { xs: xs.to_vec() }))
    }

    /// Op-by-op record of the forward pass (leaves and params excluded).
    pub fn trace(&self) -> Vec<TraceEntry> {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf | Op::Param(_)))
            .map(|n| TraceEntry {
                scope: n.scope.clone(),
                op: n.op.name(),
                dims: n.dims.to_string(),
                digest: digest(&n.value),
            })
            .collect()
    }

    /// Back-propagates `seeds` (output variable, upstream gradient) through
    /// every recorded op.
    pub fn backward(&self, seeds: &[(Var, &Tensor)]) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward called before any forward op".into()));
        }
        if seeds.is_empty() {
            return Err(Error::Tape("backward needs at least one seed".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        for (v, seed) in seeds {
            let node = self.node(*v)?;
            let (c, h, w) = self.map_dims(*v, "backward")?;
            if seed.shape() != (c, h, w) {
                return Err(Error::shape(
                    "backward",
                    format!("seed {:?} for output {}", seed.shape(), node.dims),
                ));
            }
            accumulate(&mut grads, *v, n_of(node), |g| {
                g.iter_mut().zip(seed.data()).for_each(|(a, b)| *a += b)
            });
        }

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let mut out = Gradients {
            grads,
            params: self.params.clone(),
        };
        // every parameter that was brought onto the tape gets a gradient
        for (&_, &v) in &self.params {
            if out.grads[v.0].is_none() {
                out.grads[v.0] = Some(vec![0.0; self.nodes[v.0].value.len()]);
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv { x, k, bias } => {
                let Dims::Map(_, oh, ow) = node.dims else { unreachable!() };
                let Dims::Map(_, h, w) = self.nodes[x.0].dims else { unreachable!() };
                let Dims::Kernel(geom) = self.nodes[k.0].dims else { unreachable!() };
                let kv = &self.nodes[k.0].value;
                let xv = &self.nodes[x.0].value;
                accumulate(grads, *x, len(*x), |gx| {
                    kernels::conv_backward_input(g, (oh, ow), kv, geom, gx, (h, w))
                });
                accumulate(grads, *k, len(*k), |gk| {
                    kernels::conv_backward_kernel(xv, (h, w), g, (oh, ow), geom, gk)
                });
                if let Some(b) = bias {
                    accumulate(grads, *b, len(*b), |gb| bias_grad(g, oh * ow, gb));
                }
            }
            Op::Deconv { x, k, bias } => {
                let Dims::Map(_, oh, ow) = node.dims else { unreachable!() };
                let Dims::Map(_, h, w) = self.nodes[x.0].dims else { unreachable!() };
                let Dims::Kernel(geom) = self.nodes[k.0].dims else { unreachable!() };
                let kv = &self.nodes[k.0].value;
                let xv = &self.nodes[x.0].value;
                accumulate(grads, *x, len(*x), |gx| {
                    kernels::conv_forward(g, (oh, ow), kv, geom, gx, (h, w))
                });
                accumulate(grads, *k, len(*k), |gk| {
                    kernels::conv_backward_kernel(g, (oh, ow), xv, (h, w), geom, gk)
                });
                if let Some(b) = bias {
                    accumulate(grads, *b, len(*b), |gb| bias_grad(g, oh * ow, gb));
                }
            }
            Op::MaxPool { x, argmax } => {
                accumulate(grads, *x, len(*x), |gx| {
                    for (gi, &src) in g.iter().zip(argmax) {
                        gx[src] += gi;
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = &node.value;
                accumulate(grads, *x, len(*x), |gx| {
                    for ((d, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Relu { x } => {
                let y = &node.value;
                accumulate(grads, *x, len(*x), |gx| {
                    for ((d, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        if *yi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Scale { x, s } => {
                accumulate(grads, *x, len(*x), |gx| {
                    gx.iter_mut().zip(g).for_each(|(d, gi)| *d += s * gi)
                });
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, len(*a), |ga| {
                    ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi)
                });
                accumulate(grads, *b, len(*b), |gb| {
                    gb.iter_mut().zip(g).for_each(|(d, gi)| *d += gi)
                });
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                accumulate(grads, *a, len(*a), |ga| {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                });
                accumulate(grads, *b, len(*b), |gb| {
                    for ((d, gi), y) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * y;
                    }
                });
            }
            Op::Gate { alpha, x } => {
                let Dims::Map(c, h, w) = node.dims else { unreachable!() };
                let n = h * w;
                let av = &self.nodes[alpha.0].value;
                let xv = &self.nodes[x.0].value;
                accumulate(grads, *alpha, n, |ga| {
                    for ch in 0..c {
                        let gs = &g[ch * n..(ch + 1) * n];
                        let xs = &xv[ch * n..(ch + 1) * n];
                        for ((d, gi), xi) in ga.iter_mut().zip(gs).zip(xs) {
                            *d += gi * xi;
                        }
                    }
                });
                accumulate(grads, *x, len(*x), |gx| {
                    for ch in 0..c {
                        let gs = &g[ch * n..(ch + 1) * n];
                        for ((d, gi), ai) in gx[ch * n..(ch + 1) * n].iter_mut().zip(gs).zip(av) {
                            *d += gi * ai;
                        }
                    }
                });
            }
            Op::ChannelSum { x } => {
                let n = g.len();
                accumulate(grads, *x, len(*x), |gx| {
                    for chunk in gx.chunks_mut(n) {
                        chunk.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                    }
                });
            }
            Op::Concat { xs } => {
                let mut off = 0;
                for &x in xs {
                    let l = len(x);
                    let gs = &g[off..off + l];
                    accumulate(grads, x, l, |gx| {
                        gx.iter_mut().zip(gs).for_each(|(d, gi)| *d += gi)
                    });
                    off += l;
                }
            }
            Op::Mean { xs } => {
                let inv = 1.0 / xs.len() as f64;
                for &x in xs {
                    accumulate(grads, x, len(x), |gx| {
                        gx.iter_mut().zip(g).for_each(|(d, gi)| *d += inv * gi)
                    });
                }
            }
        }
    }
}

impl From<(usize, usize, usize)> for Dims {
    fn from((c, h, w): (usize, usize, usize)) -> Self {
        Dims::Map(c, h, w)
    }
}

fn n_of(node: &Node) -> usize {
    node.value.len()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn fill_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        chunk.fill(b);
    }
}

fn bias_grad(g: &[f64], plane: usize, gb: &mut [f64]) {
    for (chunk, d) in g.chunks(plane).zip(gb.iter_mut()) {
        *d += chunk.iter().sum::<f64>();
    }
}

fn digest(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of a variable, if any seed reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Gradient of a stored parameter that was brought onto the tape.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|v| self.get(*v))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_on_empty_tape_is_rejected() {
        let tape = Tape::new();
        let t = Tensor::zeros(1, 1, 1);
        assert!(matches!(tape.backward(&[(Var(0), &t)]), Err(Error::Tape(_))));
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = Tensor::random(&mut rng, 2, 3, 4, -1.0, 1.0);
        let v = tape.input(&x);
        let g = tape.backward(&[(v, &Tensor::ones(2, 3, 4))]).unwrap();
        assert!(g.get(v).unwrap().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::zeros(1, 1, 1));
        let y = tape.sigmoid(x).unwrap();
        let g = tape.backward(&[(y, &Tensor::ones(1, 1, 1))]).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.25]);
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::filled(1, 2, 2, 3.0));
        let y = tape.maxpool(x, 2, 2).unwrap();
        let g = tape.backward(&[(y, &Tensor::ones(1, 1, 1))]).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn untouched_params_get_zero_gradient() {
        let mut params = Params::new();
        let k = ConvKernel::zeros((1, 1, 3, 3), 1, 1).unwrap();
        let used = params.add_kernel("used", &k);
        let idle = params.add_kernel("idle", &k);
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::ones(1, 4, 4));
        let kv = tape.param(&params, used);
        let iv = tape.param(&params, idle);
        assert_eq!(tape.param_id(iv), Some(idle));
        assert_eq!(tape.param_id(x), None);
        let y = tape.conv2d(x, kv, None).unwrap();
        let g = tape.backward(&[(y, &Tensor::ones(1, 4, 4))]).unwrap();
        assert!(g.param(used).unwrap().iter().any(|&d| d != 0.0));
        assert!(g.param(idle).unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::new();
        let a = tape.input(&Tensor::zeros(1, 2, 2));
        let b = tape.input(&Tensor::zeros(2, 2, 2));
        assert!(tape.add(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
        let k = tape.kernel(&ConvKernel::zeros((1, 3, 1, 1), 1, 0).unwrap());
        assert!(tape.conv2d(a, k, None).is_err());
        assert!(tape.gate(b, a).is_err());
    }

    #[test]
    fn trace_records_scopes() {
        let mut tape = Tape::new();
        let a = tape.input(&Tensor::ones(1, 2, 2));
        tape.scoped("outer", |t| {
            t.scoped("inner", |t| t.sigmoid(a).unwrap());
        });
        let tr = tape.trace();
        assert_eq!(tr.len(), 1);
        assert_eq!(tr[0].scope, "outer/inner");
        assert_eq!(tr[0].op, "sigmoid");
    }
}
