//! Energy terms, evaluated for diagnostics. Nothing here is minimised directly.

use super::{AgCrfParams, GateAssignment, ScaleSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `-(a/2) * sum_i ||h_i - f_i||^2`.
pub fn unary_energy(h: &Tensor, f: &Tensor, a: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::invalid(format!("unary weight must be > 0, got {a}")));
    }
    if h.shape() != f.shape() {
        return Err(Error::shape(
            "unary_energy",
            format!("{:?} vs {:?}", h.shape(), f.shape()),
        ));
    }
    let sq: f64 = h
        .data()
        .iter()
        .zip(f.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(-0.5 * a * sq)
}

/// Row-major `(C_r + 1) x (C_e + 1)` matrix `[[L, l_r], [l_e^T, 1]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl BilinearMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(Error::shape(
                "BilinearMatrix::new",
                format!("{} values for {rows}x{cols}", values.len()),
            ));
        }
        if values[rows * cols - 1] != 1.0 {
            return Err(Error::invalid(format!(
                "bottom-right entry must be 1, got {}",
                values[rows * cols - 1]
            )));
        }
        Ok(BilinearMatrix { rows, cols, values })
    }

    /// Assembles the matrix from its blocks. `l` is `C_r x C_e` row-major.
    pub fn from_blocks(l: &[f64], l_r: &[f64], l_e: &[f64]) -> Result<Self> {
        let (cr, ce) = (l_r.len(), l_e.len());
        if l.len() != cr * ce {
            return Err(Error::shape(
                "BilinearMatrix::from_blocks",
                format!("L has {} entries, expected {cr}x{ce}", l.len()),
            ));
        }
        let cols = ce + 1;
        let mut values = vec![0.0; (cr + 1) * cols];
        for r in 0..cr {
            values[r * cols..r * cols + ce].copy_from_slice(&l[r * ce..(r + 1) * ce]);
            values[r * cols + ce] = l_r[r];
        }
        values[cr * cols..cr * cols + ce].copy_from_slice(l_e);
        values[(cr + 1) * cols - 1] = 1.0;
        Self::new(cr + 1, cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

/// `h~_r^T K h~_e` with `h~ = (h, 1)`.
pub fn pairwise_energy(h_r: &[f64], h_e: &[f64], k: &BilinearMatrix) -> Result<f64> {
    if h_r.len() + 1 != k.rows || h_e.len() + 1 != k.cols {
        return Err(Error::shape(
            "pairwise_energy",
            format!(
                "vectors of length {} and {} against a {}x{} matrix",
                h_r.len(),
                h_e.len(),
                k.rows,
                k.cols
            ),
        ));
    }
    let aug = |v: &[f64], i: usize| if i < v.len() { v[i] } else { 1.0 };
    let mut acc = 0.0;
    for r in 0..k.rows {
        let hr = aug(h_r, r);
        if hr == 0.0 {
            continue;
        }
        let row: f64 = (0..k.cols).map(|c| k.at(r, c) * aug(h_e, c)).sum();
        acc += hr * row;
    }
    Ok(acc)
}

/// Unary terms plus gate-masked pairwise terms over every ordered scale pair.
/// The neighbourhood of pixel `i` is the kernel footprint centred on it;
/// footprint positions falling outside the image contribute nothing.
pub fn total_energy(
    h: &ScaleSet,
    g: &GateAssignment,
    f: &ScaleSet,
    p: &AgCrfParams,
) -> Result<f64> {
    p.check(f)?;
    if h.channels() != f.channels() || h.spatial() != f.spatial() {
        return Err(Error::shape(
            "total_energy",
            "hidden and observed scale sets differ",
        ));
    }
    if g.num_pairs() != p.pairs().len() || g.spatial() != f.spatial() {
        return Err(Error::shape(
            "total_energy",
            format!(
                "gate assignment has {} pairs over {:?}, expected {} over {:?}",
                g.num_pairs(),
                g.spatial(),
                p.pairs().len(),
                f.spatial()
            ),
        ));
    }
    let mut e = 0.0;
    for s in 0..f.len() {
        e += unary_energy(h.scale(s), f.scale(s), p.fixed_unary(s)?)?;
    }
    let (hh, ww) = f.spatial();
    for (idx, pk) in p.pairs().iter().enumerate() {
        let hr = h.scale(pk.receiver);
        let he = h.scale(pk.emitter);
        let (cr, ce) = (hr.channels(), he.channels());
        let (_, _, kh, kw) = pk.pairwise.shape();
        let pad = pk.pairwise.padding() as isize;
        let gates = g.pair(idx);
        for y in 0..hh {
            for x in 0..ww {
                if gates[y * ww + x] == 0 {
                    continue;
                }
                let vr: Vec<f64> = (0..cr).map(|c| hr.get(c, y, x)).collect();
                for ky in 0..kh {
                    for kx in 0..kw {
                        let jy = y as isize + ky as isize - pad;
                        let jx = x as isize + kx as isize - pad;
                        if jy < 0 || jx < 0 || jy >= hh as isize || jx >= ww as isize {
                            continue;
                        }
                        let ve: Vec<f64> = (0..ce)
                            .map(|c| he.get(c, jy as usize, jx as usize))
                            .collect();
                        let l: Vec<f64> = (0..cr)
                            .flat_map(|o| (0..ce).map(move |i| (o, i)))
                            .map(|(o, i)| pk.pairwise.at(o, i, ky, kx))
                            .collect();
                        let lr: Vec<f64> =
                            (0..cr).map(|c| pk.linear_receiver.at(0, c, ky, kx)).collect();
                        let le: Vec<f64> =
                            (0..ce).map(|c| pk.linear_emitter.at(0, c, ky, kx)).collect();
                        let k = BilinearMatrix::from_blocks(&l, &lr, &le)?;
                        e += pairwise_energy(&vr, &ve, &k)?;
                    }
                }
            }
        }
    }
    Ok(e)
}
