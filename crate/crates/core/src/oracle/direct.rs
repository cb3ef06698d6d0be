//! Literal loop-nest references. Slow on purpose; size-limited.

use crate::agcrf::{AgCrfParams, MeanFieldState, PairKernels, ScaleSet, Schedule, Variant};
use crate::error::{Error, Result};
use crate::tensor::{ConvKernel, Tensor};

pub const MAX_SIDE: usize = 16;
pub const MAX_CHANNELS: usize = 8;

fn check_small(op: &str, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.shape();
    if c > MAX_CHANNELS || h > MAX_SIDE || w > MAX_SIDE {
        return Err(Error::invalid(format!(
            "{op}: instance {c}x{h}x{w} exceeds the oracle limit of {MAX_CHANNELS}x{MAX_SIDE}x{MAX_SIDE}"
        )));
    }
    Ok(())
}

fn signed(v: usize) -> i64 {
    v as i64
}

/// Cross-correlation, one output element at a time.
pub fn direct_conv(x: &Tensor, k: &ConvKernel) -> Result<Tensor> {
    check_small("direct_conv", x)?;
    let (oc, ic, kh, kw) = k.shape();
    let (c, h, w) = x.shape();
    if ic != c {
        return Err(Error::shape("direct_conv", format!("{c} input channels vs kernel {ic}")));
    }
    let (s, p) = (signed(k.stride()), signed(k.padding()));
    let oh = (signed(h) + 2 * p - signed(kh)) / s + 1;
    let ow = (signed(w) + 2 * p - signed(kw)) / s + 1;
    if oh <= 0 || ow <= 0 || signed(h) + 2 * p < signed(kh) || signed(w) + 2 * p < signed(kw) {
        return Err(Error::shape("direct_conv", "kernel larger than padded input"));
    }
    let (oh, ow) = (oh as usize, ow as usize);
    let mut out = Tensor::zeros(oc, oh, ow);
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for i in 0..ic {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = signed(oy) * s + signed(ky) - p;
                            let ix = signed(ox) * s + signed(kx) - p;
                            if iy >= 0 && ix >= 0 && iy < signed(h) && ix < signed(w) {
                                acc += k.at(o, i, ky, kx) * x.get(i, iy as usize, ix as usize);
                            }
                        }
                    }
                }
                out.set(o, oy, ox, acc);
            }
        }
    }
    Ok(out)
}

/// Transposed convolution by scattering every input element.
pub fn direct_deconv(x: &Tensor, k: &ConvKernel) -> Result<Tensor> {
    check_small("direct_deconv", x)?;
    let (oc, ic, kh, kw) = k.shape();
    let (c, h, w) = x.shape();
    if oc != c {
        return Err(Error::shape("direct_deconv", format!("{c} input channels vs kernel {oc}")));
    }
    let (s, p) = (signed(k.stride()), signed(k.padding()));
    let oh = (signed(h) - 1) * s - 2 * p + signed(kh);
    let ow = (signed(w) - 1) * s - 2 * p + signed(kw);
    if oh <= 0 || ow <= 0 {
        return Err(Error::shape("direct_deconv", "empty output"));
    }
    let mut out = Tensor::zeros(ic, oh as usize, ow as usize);
    for o in 0..oc {
        for y in 0..h {
            for x_ in 0..w {
                let v = x.get(o, y, x_);
                for i in 0..ic {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let ty = signed(y) * s + signed(ky) - p;
                            let tx = signed(x_) * s + signed(kx) - p;
                            if ty >= 0 && tx >= 0 && ty < oh && tx < ow {
                                let (ty, tx) = (ty as usize, tx as usize);
                                out.set(i, ty, tx, out.get(i, ty, tx) + v * k.at(o, i, ky, kx));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn direct_maxpool(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    check_small("direct_maxpool", x)?;
    let (c, h, w) = x.shape();
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::invalid("direct_maxpool: bad window"));
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..window {
                    for dx in 0..window {
                        m = m.max(x.get(ch, oy * stride + dy, ox * stride + dx));
                    }
                }
                out.set(ch, oy, ox, m);
            }
        }
    }
    Ok(out)
}

fn find_pair<'a>(p: &'a AgCrfParams, e: usize, r: usize) -> Result<&'a PairKernels> {
    p.pairs()
        .iter()
        .find(|k| k.emitter == e && k.receiver == r)
        .ok_or_else(|| Error::invalid(format!("no pair {e} -> {r}")))
}

/// Footprint neighbours `(ky, kx, jy, jx)` of pixel `(y, x)` that fall inside the image.
fn neighbours(k: &ConvKernel, y: usize, x: usize, h: usize, w: usize) -> Vec<(usize, usize, usize, usize)> {
    let (_, _, kh, kw) = k.shape();
    let p = signed(k.padding());
    let mut out = Vec::new();
    for ky in 0..kh {
        for kx in 0..kw {
            let jy = signed(y) + signed(ky) - p;
            let jx = signed(x) + signed(kx) - p;
            if jy >= 0 && jx >= 0 && jy < signed(h) && jx < signed(w) {
                out.push((ky, kx, jy as usize, jx as usize));
            }
        }
    }
    out
}

/// Gate statistic by explicit vector-matrix-vector products per pixel pair.
pub fn direct_m(state: &MeanFieldState, p: &AgCrfParams, e: usize, r: usize) -> Result<Tensor> {
    let pk = find_pair(p, e, r)?;
    let (he, hr) = (&state.hbar[e], &state.hbar[r]);
    check_small("direct_m", he)?;
    check_small("direct_m", hr)?;
    let (cr, h, w) = hr.shape();
    let ce = he.channels();
    let mut out = Tensor::zeros(1, h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ky, kx, jy, jx) in neighbours(&pk.pairwise, y, x, h, w) {
                for o in 0..cr {
                    let mut row = 0.0;
                    for c in 0..ce {
                        row += pk.pairwise.at(o, c, ky, kx) * he.get(c, jy, jx);
                    }
                    acc += hr.get(o, y, x) * row;
                    acc += hr.get(o, y, x) * pk.linear_receiver.at(0, o, ky, kx);
                }
                for c in 0..ce {
                    acc += he.get(c, jy, jx) * pk.linear_emitter.at(0, c, ky, kx);
                }
            }
            out.set(0, y, x, acc);
        }
    }
    Ok(out)
}

/// Message `sum_j (L_ij h_e,j + l_r,ij)` by explicit summation.
pub fn direct_message(state: &MeanFieldState, p: &AgCrfParams, e: usize, r: usize) -> Result<Tensor> {
    let pk = find_pair(p, e, r)?;
    let he = &state.hbar[e];
    check_small("direct_message", he)?;
    let (ce, h, w) = he.shape();
    let cr = state.hbar[r].channels();
    let mut out = Tensor::zeros(cr, h, w);
    for o in 0..cr {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ky, kx, jy, jx) in neighbours(&pk.pairwise, y, x, h, w) {
                    for c in 0..ce {
                        acc += pk.pairwise.at(o, c, ky, kx) * he.get(c, jy, jx);
                    }
                    acc += pk.linear_receiver.at(0, o, ky, kx);
                }
                out.set(o, y, x, acc);
            }
        }
    }
    Ok(out)
}

fn logistic(v: f64) -> f64 {
    if v < 0.0 {
        let e = v.exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + (-v).exp())
    }
}

/// One closed-form sweep built only from the loop-nest references.
pub fn direct_sweep(f: &ScaleSet, p: &AgCrfParams, state: &mut MeanFieldState) -> Result<()> {
    let s = f.len();
    let before = state.clone();
    for r in 0..s {
        let a = p.fixed_unary(r)?;
        let mut h_new = f.scale(r).clone();
        for e in 0..s {
            if e == r {
                continue;
            }
            let read = match p.schedule {
                Schedule::Sequential => &*state,
                Schedule::Simultaneous => &before,
            };
            let m = direct_m(read, p, e, r)?;
            let msg = direct_message(read, p, e, r)?;
            let (c, h, w) = msg.shape();
            let mut alpha = Tensor::zeros(1, h, w);
            for y in 0..h {
                for x in 0..w {
                    let g = logistic(p.sign.factor() * m.get(0, y, x));
                    alpha.set(0, y, x, g);
                    for ch in 0..c {
                        let v = h_new.get(ch, y, x) + g * msg.get(ch, y, x) / a;
                        h_new.set(ch, y, x, v);
                    }
                }
            }
            let idx = p
                .pairs()
                .iter()
                .position(|k| k.emitter == e && k.receiver == r)
                .expect("pair found above");
            state.alpha[idx] = alpha;
        }
        state.hbar[r] = h_new;
    }
    Ok(())
}

/// Closed-form inference assembled from the loop-nest references.
pub fn direct_reference_inference(f: &ScaleSet, p: &AgCrfParams) -> Result<MeanFieldState> {
    p.check(f)?;
    if p.variant != Variant::Flag {
        return Err(Error::invalid("closed-form inference needs the flag variant"));
    }
    let mut state = MeanFieldState::initial(f);
    for _ in 0..p.iterations {
        direct_sweep(f, p, &mut state)?;
    }
    Ok(state)
}

/// Max-abs change of the hidden features under one more sweep.
pub fn fixed_point_residual(f: &ScaleSet, p: &AgCrfParams, state: &MeanFieldState) -> Result<f64> {
    let mut next = state.clone();
    direct_sweep(f, p, &mut next)?;
    state.hbar_max_abs_diff(&next)
}

/// Central differences of `func` at `x`, one coordinate at a time.
pub fn finite_diff_grad(mut func: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = func(&probe);
        probe[i] = x[i] - h;
        let down = func(&probe);
        probe[i] = x[i];
        g.push((up - down) / (2.0 * h));
    }
    g
}

/// Central difference along a single coordinate.
pub fn finite_diff_coord(mut func: impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + h;
    let up = func(&probe);
    probe[i] = x[i] - h;
    let down = func(&probe);
    (up - down) / (2.0 * h)
}
