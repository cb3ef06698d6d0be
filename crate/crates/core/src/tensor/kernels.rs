//! Raw slice kernels shared by the functional ops and the tape.
//!
//! All maps are channel-major `[c][h][w]`, kernels are `[out][in][kh][kw]`.
//! The three convolution primitives are the forward correlation and its two
//! adjoints; transposed convolution is the input adjoint run forward.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geom {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Range of output columns `ox` for which `ox*stride + k - pad` lands in `[0, w)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    // smallest ox with ox*stride + k >= pad
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    // largest ox with ox*stride + k - pad <= w - 1
    let hi = if w + pad < k + 1 {
        0
    } else {
        ((w - 1 + pad - k) / stride + 1).min(ow)
    };
    (lo.min(hi), hi)
}

/// `out[o] += sum_i k[o,i] * x[i]` (cross-correlation). `out` must be pre-filled (bias or zero).
pub(crate) fn conv_forward(
    x: &[f64],
    (h, w): (usize, usize),
    k: &[f64],
    g: Geom,
    out: &mut [f64],
    (oh, ow): (usize, usize),
) {
    let Geom {
        out_ch,
        in_ch,
        kh,
        kw,
        stride,
        pad,
    } = g;
    for o in 0..out_ch {
        let out_o = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for i in 0..in_ch {
            let x_i = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(ky, pad, stride, h, oh);
                for kx in 0..kw {
                    let wv = k[((o * in_ch + i) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = valid_range(kx, pad, stride, w, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let out_row = &mut out_o[oy * ow..(oy + 1) * ow];
                        let x_row = &x_i[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            let ix_lo = ox_lo + kx - pad;
                            let n = ox_hi - ox_lo;
                            let dst = &mut out_row[ox_lo..ox_hi];
                            let src = &x_row[ix_lo..ix_lo + n];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += wv * x_row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv_forward`] in its input: `gx[i] += sum_o k[o,i]^T * gy[o]`.
pub(crate) fn conv_backward_input(
    gy: &[f64],
    (oh, ow): (usize, usize),
    k: &[f64],
    g: Geom,
    gx: &mut [f64],
    (h, w): (usize, usize),
) {
    let Geom {
        out_ch,
        in_ch,
        kh,
        kw,
        stride,
        pad,
    } = g;
    for o in 0..out_ch {
        let gy_o = &gy[o * oh * ow..(o + 1) * oh * ow];
        for i in 0..in_ch {
            let gx_i = &mut gx[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(ky, pad, stride, h, oh);
                for kx in 0..kw {
                    let wv = k[((o * in_ch + i) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = valid_range(kx, pad, stride, w, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let gy_row = &gy_o[oy * ow..(oy + 1) * ow];
                        let gx_row = &mut gx_i[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            let ix_lo = ox_lo + kx - pad;
                            let n = ox_hi - ox_lo;
                            let dst = &mut gx_row[ix_lo..ix_lo + n];
                            for (d, s) in dst.iter_mut().zip(&gy_row[ox_lo..ox_hi]) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                gx_row[ox * stride + kx - pad] += wv * gy_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dot product over eight independent partial sums, so the loop vectorises.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    lanes.iter().sum::<f64>() + tail
}

/// Adjoint of [`conv_forward`] in its kernel: `gk[o,i,ky,kx] += sum gy[o] * shifted x[i]`.
pub(crate) fn conv_backward_kernel(
    x: &[f64],
    (h, w): (usize, usize),
    gy: &[f64],
    (oh, ow): (usize, usize),
    g: Geom,
    gk: &mut [f64],
) {
    let Geom {
        out_ch,
        in_ch,
        kh,
        kw,
        stride,
        pad,
    } = g;
    for o in 0..out_ch {
        let gy_o = &gy[o * oh * ow..(o + 1) * oh * ow];
        for i in 0..in_ch {
            let x_i = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(ky, pad, stride, h, oh);
                for kx in 0..kw {
                    let (ox_lo, ox_hi) = valid_range(kx, pad, stride, w, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let gy_row = &gy_o[oy * ow..(oy + 1) * ow];
                        let x_row = &x_i[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            let ix_lo = ox_lo + kx - pad;
                            let n = ox_hi - ox_lo;
                            acc += dot(&gy_row[ox_lo..ox_hi], &x_row[ix_lo..ix_lo + n]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                acc += gy_row[ox] * x_row[ox * stride + kx - pad];
                            }
                        }
                    }
                    gk[((o * in_ch + i) * kh + ky) * kw + kx] += acc;
                }
            }
        }
    }
}

/// Max-pool forward; returns flat argmax indices into the channel plane.
/// Ties resolve to the first index in row-major window order.
pub(crate) fn maxpool_forward(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    window: usize,
    stride: usize,
    out: &mut [f64],
    argmax: &mut [usize],
    (oh, ow): (usize, usize),
) {
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for wy in 0..window {
                    for wx in 0..window {
                        let idx = (oy * stride + wy) * w + ox * stride + wx;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = ch * oh * ow + oy * ow + ox;
                out[o] = best;
                argmax[o] = ch * h * w + best_idx;
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for stride in 1..4 {
            for pad in 0..4 {
                for k in 0..7 {
                    for w in 1..9 {
                        for ow in 1..10 {
                            let (lo, hi) = valid_range(k, pad, stride, w, ow);
                            for ox in 0..ow {
                                let ix = (ox * stride + k) as isize - pad as isize;
                                let inside = ix >= 0 && (ix as usize) < w;
                                assert_eq!(inside, ox >= lo && ox < hi, "s{stride} p{pad} k{k} w{w} ox{ox}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
    }
}
